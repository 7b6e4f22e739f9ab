"""Marginal link construction and evaluation.

Builds the contrast/marginalisation pair (C, M) that maps a joint
probability vector to its stacked marginal-interaction parameters

    eta = C log(M pi),

with one block per non-empty margin set, and provides the inverse map by
damped Newton iteration plus the analytic Jacobian used by the fitters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tables import LOGIT_TYPES, VariableSpec

# smallest log cell probability carried through batch evaluation; keeps
# exp() above the subnormal range so log(M pi) never hits -inf
LOG_FLOOR = -625.0


class LinkError(ValueError):
    """Domain errors in link construction or evaluation."""


class InversionError(RuntimeError):
    """Newton inversion failed to reach tolerance."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


def margin_sets(q: int):
    """All non-empty margin sets as 0/1 tuples.

    Ordered so that {A1}, {A2}, {A1,A2}, {A3}, ... i.e. by the integer
    whose i-th bit (least significant first) marks variable i.
    """
    return [tuple((k >> i) & 1 for i in range(q)) for k in range(1, 2 ** q)]


def build_logit_block(m: int, logit_type: str) -> np.ndarray:
    """Aggregation block for one variable: 2(m-1) x m, denominator rows
    first, numerator rows second.

    With the contrast (-I | I) this reproduces the local / global /
    continuation / reverse-continuation logit definitions.
    """
    if m < 2:
        raise LinkError(f"m must be >= 2, got {m}")
    if logit_type not in LOGIT_TYPES:
        raise LinkError(f"unknown logit type {logit_type!r}")
    I = np.eye(m - 1)
    T = np.tril(np.ones((m - 1, m - 1)))
    z = np.zeros((m - 1, 1))
    den_num = {
        "local": (np.hstack([I, z]), np.hstack([z, I])),
        "global": (np.hstack([T, z]), np.hstack([z, T.T])),
        "continuation": (np.hstack([I, z]), np.hstack([z, T.T])),
        "reverse_continuation": (np.hstack([T, z]), np.hstack([z, I])),
    }
    den, num = den_num[logit_type]
    return np.vstack([den, num])


@dataclass(frozen=True)
class MarginSet:
    """One margin: which variables are active, and where its interaction
    block sits inside eta."""

    z: tuple
    lo: int
    hi: int

    @property
    def order(self) -> int:
        return sum(self.z)


@dataclass
class LinkMatrices:
    """The (C, M) pair for one stratum plus the eta block layout."""

    dims: tuple
    logit_types: tuple
    C: np.ndarray
    M: np.ndarray
    blocks: list
    t: int
    _restricted_cache: dict = field(default_factory=dict, repr=False)

    @property
    def q(self) -> int:
        return len(self.dims)

    @property
    def r(self) -> int:
        return int(np.prod(self.dims))

    def block_for(self, z) -> MarginSet:
        z = tuple(z)
        for b in self.blocks:
            if b.z == z:
                return b
        raise LinkError(f"no margin block {z} for q = {self.q}")

    def rows_of(self, z) -> np.ndarray:
        b = self.block_for(z)
        return np.arange(b.lo, b.hi)

    def restricted(self, rows) -> tuple:
        """(C_sub, M_sub) touching only the given eta rows; cached."""
        key = tuple(int(i) for i in rows)
        if key not in self._restricted_cache:
            C_sub = self.C[list(key), :]
            needed = np.nonzero(np.any(C_sub != 0, axis=0))[0]
            self._restricted_cache[key] = (C_sub[:, needed], self.M[needed, :])
        return self._restricted_cache[key]


def build_link(variables) -> LinkMatrices:
    """Assemble C and M over all margin sets of the given variables."""
    variables = list(variables)
    if not variables:
        raise LinkError("need at least one variable")
    dims = tuple(v.m for v in variables)
    kinds = tuple(v.logit_type for v in variables)
    q = len(dims)
    Cs, Ms, blocks = [], [], []
    lo = 0
    for z in margin_sets(q):
        C_z = np.ones((1, 1))
        M_z = np.ones((1, 1))
        for i in range(q):
            if z[i]:
                m = dims[i]
                C_i = np.hstack([-np.eye(m - 1), np.eye(m - 1)])
                M_i = build_logit_block(m, kinds[i])
            else:
                C_i = np.ones((1, 1))
                M_i = np.ones((1, dims[i]))
            C_z = np.kron(C_z, C_i)
            M_z = np.kron(M_z, M_i)
        Cs.append(C_z)
        Ms.append(M_z)
        blocks.append(MarginSet(z, lo, lo + C_z.shape[0]))
        lo += C_z.shape[0]
    t = lo
    nm = sum(M.shape[0] for M in Ms)
    r = int(np.prod(dims))
    C = np.zeros((t, nm))
    M = np.zeros((nm, r))
    rc = rm = 0
    for C_z, M_z in zip(Cs, Ms):
        C[rc:rc + C_z.shape[0], rm:rm + M_z.shape[0]] = C_z
        M[rm:rm + M_z.shape[0], :] = M_z
        rc += C_z.shape[0]
        rm += M_z.shape[0]
    return LinkMatrices(dims, kinds, C, M, blocks, t)


def link_for(dims, logit_types) -> LinkMatrices:
    """Convenience constructor from dims and per-variable logit types."""
    if isinstance(logit_types, str):
        logit_types = [logit_types] * len(dims)
    if len(logit_types) != len(dims):
        raise LinkError("one logit type per variable required")
    return build_link(
        VariableSpec(f"A{i + 1}", m, lt) for i, (m, lt) in enumerate(zip(dims, logit_types))
    )


# ---------------------------------------------------------------------------
# Forward map, batch evaluation, Jacobian
# ---------------------------------------------------------------------------

def _check_pi(pi, link, tol=1e-12):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (link.r,):
        raise LinkError(f"pi has shape {pi.shape}, expected ({link.r},)")
    if np.any(pi <= 0) or not np.all(np.isfinite(pi)):
        raise LinkError("pi must be strictly positive and finite")
    if abs(pi.sum() - 1.0) > tol:
        raise LinkError(f"pi sums to {pi.sum()!r}, not 1 within {tol}")
    return pi


def eta_from_logpi(logpi, link: LinkMatrices) -> np.ndarray:
    """eta from log probabilities; exact per-row logsumexp, overflow-free."""
    logpi = np.asarray(logpi, dtype=float)
    logm = logsumexp(np.broadcast_to(logpi, link.M.shape), b=link.M, axis=1)
    return link.C @ logm


def eta_from_pi(pi, link: LinkMatrices, sum_tol=1e-12) -> np.ndarray:
    pi = _check_pi(pi, link, sum_tol)
    return eta_from_logpi(np.log(pi), link)


def eta_batch(P: np.ndarray, link: LinkMatrices, rows=None) -> np.ndarray:
    """eta for a batch of probability vectors P of shape (N, r).

    Cells are floored at exp(LOG_FLOOR) so the log never produces -inf;
    draws affected by the floor carry negligible importance weight.
    Restricting to `rows` skips the eta coordinates no constraint reads.
    """
    P = np.maximum(P, np.exp(LOG_FLOOR))
    if rows is None:
        return np.log(P @ link.M.T) @ link.C.T
    C_sub, M_sub = link.restricted(rows)
    return np.log(P @ M_sub.T) @ C_sub.T


def eta_jacobian_from_logpi(logpi, link: LinkMatrices) -> np.ndarray:
    """d eta / d theta for the minimal parameterisation pi = softmax([0, theta]).

    Uses d eta/d lambda = C Q with Q[row, c] = pi_c / (M pi)_row on the row
    support; every C block row sums to zero so the softmax normalisation
    term drops out exactly.
    """
    logpi = np.asarray(logpi, dtype=float)
    logm = logsumexp(np.broadcast_to(logpi, link.M.shape), b=link.M, axis=1)
    D = np.where(link.M != 0, logpi[None, :] - logm[:, None], -np.inf)
    J = link.C @ np.exp(D)       # in-support entries are <= 0, never overflow
    return J[:, 1:]


def eta_jacobian(pi, link: LinkMatrices) -> np.ndarray:
    pi = _check_pi(pi, link)
    return eta_jacobian_from_logpi(np.log(pi), link)


# ---------------------------------------------------------------------------
# Newton inversion
# ---------------------------------------------------------------------------

def _softmax0(theta):
    lam = np.concatenate([[0.0], theta])
    return lam - logsumexp(lam)


def pi_from_eta(eta, link: LinkMatrices, tol=1e-10, max_iter=200,
                max_halvings=30, start=None) -> np.ndarray:
    """Invert eta -> pi by damped Newton on the minimal log-scale
    parameterisation; starts from the uniform distribution.

    Raises InversionError (carrying the residual inf-norm) on
    non-convergence; never returns NaN.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (link.t,):
        raise LinkError(f"eta has shape {eta.shape}, expected ({link.t},)")
    if not np.all(np.isfinite(eta)):
        raise LinkError("eta must be finite")
    theta0 = np.zeros(link.r - 1) if start is None else np.array(start, dtype=float)

    theta, res = _newton_leg(eta, theta0, link, tol, max_iter, max_halvings)
    if res > tol:
        # homotopy fallback: walk the target from eta(start) to eta along a
        # straight line, warm-starting each leg; rescues stiff global-type
        # links whose least-squares landscape has spurious basins
        eta_here = eta_from_logpi(_softmax0(theta0), link)
        cur, stepsize = 0.0, 0.5
        theta = theta0
        while cur < 1.0 and stepsize >= 1.0 / 1024.0:
            tau = min(1.0, cur + stepsize)
            target = eta_here + tau * (eta - eta_here)
            cand, res_leg = _newton_leg(target, theta, link, tol, 80, max_halvings)
            if res_leg <= max(tol, 1e-9):
                theta, cur = cand, tau
                stepsize *= 2.0
            else:
                stepsize *= 0.5
        theta, res = _newton_leg(eta, theta, link, tol, max_iter, max_halvings)
    if res <= tol:
        return _positive_pi(_softmax0(theta))
    raise InversionError(
        f"Newton inversion stalled at residual {res:.3e} (tol {tol:.1e})",
        residual=float(res),
    )


def _positive_pi(logpi):
    # floor keeps the result strictly positive even when the solution sits
    # against the simplex boundary
    p = np.exp(np.maximum(logpi - logsumexp(logpi), LOG_FLOOR))
    return p / p.sum()


def _newton_leg(eta, theta, link, tol, max_iter, max_halvings):
    """Damped Newton with Levenberg-Marquardt rescue; returns (theta, res)."""
    theta = theta.copy()
    logpi = _softmax0(theta)
    F = eta_from_logpi(logpi, link) - eta
    res = np.max(np.abs(F))
    damping = 0.0

    def try_step(step):
        nonlocal theta, logpi, F, res
        scale = 1.0
        for _ in range(max_halvings):
            cand = theta - scale * step
            logpi_c = _softmax0(cand)
            F_c = eta_from_logpi(logpi_c, link) - eta
            res_c = np.max(np.abs(F_c))
            if res_c < res:
                theta, logpi, F, res = cand, logpi_c, F_c, res_c
                return True
            scale *= 0.5
        return False

    for _ in range(max_iter):
        if res <= tol:
            break
        J = eta_jacobian_from_logpi(logpi, link)
        moved = False
        if damping == 0.0:
            try:
                step = np.linalg.solve(J, F) if J.shape[0] == J.shape[1] else \
                    np.linalg.lstsq(J, F, rcond=None)[0]
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(J, F, rcond=None)[0]
            moved = try_step(step)
        if not moved:
            A0 = J.T @ J
            diag = np.diag(A0).copy()
            diag[diag <= 0] = 1.0
            g = J.T @ F
            damping = max(damping, 1e-6)
            while damping <= 1e10 and not moved:
                step = np.linalg.solve(A0 + damping * np.diag(diag), g)
                moved = try_step(step)
                if not moved:
                    damping *= 10.0
            if moved:
                damping = max(damping * 0.1, 1e-8)
        if not moved:
            break
    return theta, res
