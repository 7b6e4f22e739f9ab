"""Encompassing-prior Monte Carlo engine.

Estimates constraint-satisfaction proportions under the encompassing
Dirichlet prior and posterior (directly, or by importance sampling with a
tuned Dirichlet centred at a constrained fit), assembles Bayes factors as
posterior-over-prior proportion ratios, and runs the geometric
epsilon-shrinking chain for about-equality models.

All weight arithmetic is in log space; draws are generated per stratum
from log-gamma variates (small shapes boosted) so tiny cell probabilities
never underflow into NaNs. Streams are derived from a master seed via
SeedSequence spawn keys, so every estimate is reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaln, logsumexp

from . import fit as fitmod
from .hypotheses import ConstraintSet, ModelSpec
from .link import LOG_FLOOR, eta_batch, link_for
from .tables import StratifiedTable

LN10 = np.log(10.0)

DEFAULT_ALPHA_GRID = (0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0)


class EngineError(RuntimeError):
    pass


class TuningError(EngineError):
    """No grid concentration produced draws satisfying the constraints."""


class UnboundedEstimateError(EngineError):
    """A proportion estimate collapsed to zero with zero ESS."""

    def __init__(self, side: str, msg: str = ""):
        super().__init__(msg or f"{side}-side proportion estimate is zero with zero ESS; "
                         "the Bayes factor is unbounded on this run")
        self.side = side


# ---------------------------------------------------------------------------
# Specs and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Per-stratum Dirichlet concentrations of the encompassing prior."""

    concentration: np.ndarray    # (s, r), all entries > 0

    def __post_init__(self):
        conc = np.atleast_2d(np.asarray(self.concentration, dtype=float))
        if np.any(conc <= 0) or not np.all(np.isfinite(conc)):
            raise EngineError("prior concentrations must be positive and finite")
        object.__setattr__(self, "concentration", conc)

    @classmethod
    def flat(cls, r: int, s: int = 1, kappa: float = 1.0) -> "PriorSpec":
        return cls(np.full((s, r), float(kappa)))

    def posterior(self, table: StratifiedTable) -> np.ndarray:
        counts = table.counts_matrix()
        if counts.shape != self.concentration.shape:
            raise EngineError(
                f"prior shape {self.concentration.shape} != table shape {counts.shape}"
            )
        return self.concentration + counts


@dataclass
class ImportanceDensity:
    """Dirichlet proposal D(alpha * pi_hat) per stratum.

    `multiplier` scales each stratum's target concentration; `alpha` is the
    realised per-stratum total concentration actually used.
    """

    params: np.ndarray           # (s, r)
    alpha: np.ndarray            # (s,) realised concentrations
    multiplier: float
    center: np.ndarray           # (s, r)
    center_kind: str             # "prior_center" | "constrained_mle" | "custom"

    def __post_init__(self):
        if np.any(self.params <= 0):
            raise EngineError("importance density parameters must be strictly positive")


@dataclass
class ProportionEstimate:
    value: float
    n_draws: int
    ess: float
    se: float
    route: str                   # "direct" | "importance"
    log_value: float = -np.inf   # natural log, survives underflow
    rel_se: float = np.inf
    accepted: int = 0
    multiplier: float | None = None
    alpha: list | None = None
    max_abs_log_weight: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha) if self.alpha is not None else None
        return d


@dataclass
class EpsilonSchedule:
    """Geometric shrinking of the about-equality tolerances.

    Levels n = 1, 2, ... use eps_1 * b^(n-1); max_stages bounds the number
    of levels, so max_stages = 1 reproduces the fixed-epsilon estimate.
    stop_tol applies to |log10 stage factor|.
    """

    epsilon_start: float = 0.1
    b: float = 0.5
    stop_tol: float = 0.05
    max_stages: int = 12

    def __post_init__(self):
        if not (0 < self.b < 1):
            raise EngineError(f"shrink factor b must be in (0,1), got {self.b}")
        if self.epsilon_start <= 0:
            raise EngineError("epsilon_start must be positive")
        if self.max_stages < 1:
            raise EngineError("need at least one stage")


@dataclass
class RunSettings:
    n_draws: int = 1_000_000
    pilot_n: int = 100_000
    direct_threshold: float = 0.05
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    tune_accept_min: float = 0.01
    tune_extend_factor: float = 4.0
    tune_extend_max_multiplier: float = 1e7
    chunk: int = 32768
    ess_floor: float = 50.0
    max_retunes: int = 8
    prior_margin: float = 1.0
    margin_ladder: tuple = (0.25, 1.0, 2.0)
    smoothing: float = 0.5
    log_base: str = "10"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_grid"] = list(self.alpha_grid)
        d["margin_ladder"] = list(self.margin_ladder)
        return d


@dataclass
class BFEstimate:
    log10_bf: float
    ln_bf: float
    replicates: list                 # per-replicate log10 values
    mean: float                      # mean of replicates (log10)
    sd: float
    route: str                       # "direct+importance mix" | "about_equality"
    components: dict
    settings: dict

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Seeding and sampling
# ---------------------------------------------------------------------------

_SIDES = {"prior": 0, "posterior": 1}
_PURPOSE = {"pilot": 0, "main": 1, "tune": 2, "replicate": 3}


def substream(seed: int, *path) -> np.random.Generator:
    """Independent generator for a (seed, path) pair; path entries are
    small ints or the registered side/purpose names."""
    key = tuple(_SIDES.get(p, _PURPOSE.get(p, p)) if isinstance(p, str) else int(p)
                for p in path)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _dirichlet_chunk(rng: np.random.Generator, alpha: np.ndarray, n: int) -> np.ndarray:
    """(n, s, r) Dirichlet draws, sampled via log-gammas.

    Shapes below 1 use the boost G_a = G_{a+1} U^{1/a} evaluated in log
    space, then cells are floored at exp(LOG_FLOOR); the floor only touches
    draws whose importance weight is already negligible.
    """
    s, r = alpha.shape
    out = np.empty((n, s, r))
    for b in range(s):
        a = alpha[b]
        small = a < 1.0
        g = rng.standard_gamma(np.where(small, a + 1.0, a), size=(n, r))
        logg = np.log(np.maximum(g, 1e-300))
        if np.any(small):
            u = rng.random((n, r))
            logg[:, small] += np.log(u[:, small]) / a[small]
        logpi = logg - logsumexp(logg, axis=1, keepdims=True)
        out[:, b, :] = np.exp(np.maximum(logpi, LOG_FLOOR))
    return out


def sample_prior(prior: PriorSpec, n: int, seed: int) -> np.ndarray:
    """(n, s, r) i.i.d. draws from the per-stratum encompassing prior."""
    if n < 1:
        raise EngineError("need n >= 1 draws")
    return _dirichlet_chunk(substream(seed, 0), prior.concentration, n)


def sample_posterior(prior: PriorSpec, table: StratifiedTable, n: int, seed: int) -> np.ndarray:
    """(n, s, r) draws from D(concentration + y) per stratum."""
    if n < 1:
        raise EngineError("need n >= 1 draws")
    return _dirichlet_chunk(substream(seed, 0), prior.posterior(table), n)


def _logpdf_terms(alpha: np.ndarray):
    """Per-stratum (coef, const) with logpdf(P) = sum_b coef_b . log P_b + const_b."""
    coefs = alpha - 1.0
    consts = np.array([gammaln(a.sum()) - gammaln(a).sum() for a in alpha])
    return coefs, float(consts.sum())


# ---------------------------------------------------------------------------
# Model evaluation on draw batches
# ---------------------------------------------------------------------------

class ModelEval:
    """Precomputed reduced constraint system for fast batch evaluation."""

    def __init__(self, model: ModelSpec, dims, s: int):
        self.model = model
        self.dims = tuple(dims)
        self.link = model.link(dims)
        self.s = s
        t = self.link.t
        cs = model.constraints
        if cs.ncols != s * t:
            raise EngineError(
                f"model {model.name!r}: constraints cover {cs.ncols} eta coordinates, "
                f"expected {s * t}"
            )
        active = cs.active_eta_rows()
        self.local_rows = np.unique(active % t) if active.size else np.zeros(0, dtype=int)
        cols = np.concatenate([self.local_rows + b * t for b in range(s)]) \
            if self.local_rows.size else np.zeros(0, dtype=int)
        self.E = cs.E[:, cols]
        self.U = cs.U[:, cols]
        self.epsilon = cs.epsilon
        self.cs = cs

    def stratum_split(self):
        """Per-stratum sub-evaluators when every constraint row touches one
        stratum only; None when rows couple strata (or s == 1).

        With independent per-stratum Dirichlet draws the satisfaction
        proportion then factorises exactly over strata.
        """
        if self.s == 1 or self.cs.is_empty():
            return None
        t = self.link.t
        cs = self.cs

        def stratum_of(row):
            ss = {int(c) // t for c in np.nonzero(row)[0]}
            return ss.pop() if len(ss) == 1 else None

        eb = [stratum_of(cs.E[j]) for j in range(cs.n_eq)]
        ub = [stratum_of(cs.U[j]) for j in range(cs.n_ineq)]
        if any(b is None for b in eb + ub):
            return None
        subs = []
        for b in range(self.s):
            e_rows = [j for j, x in enumerate(eb) if x == b]
            u_rows = [j for j, x in enumerate(ub) if x == b]
            csb = ConstraintSet(
                cs.E[e_rows][:, b * t:(b + 1) * t] if e_rows else np.zeros((0, t)),
                cs.U[u_rows][:, b * t:(b + 1) * t] if u_rows else np.zeros((0, t)),
                cs.epsilon[e_rows],
                t,
            )
            mb = ModelSpec(f"{self.model.name}@s{b}", self.model.logit_types, csb,
                           self.model.notes)
            subs.append(ModelEval(mb, self.dims, 1))
        return subs

    def eta_reduced(self, P: np.ndarray) -> np.ndarray:
        if self.local_rows.size == 0:
            return np.zeros((P.shape[0], 0))
        parts = [eta_batch(P[:, b, :], self.link, rows=self.local_rows)
                 for b in range(self.s)]
        return np.concatenate(parts, axis=1)

    def delta(self, P: np.ndarray) -> np.ndarray:
        eta = self.eta_reduced(P)
        ok = np.ones(P.shape[0], dtype=bool)
        if self.E.shape[0]:
            ok &= np.all(np.abs(eta @ self.E.T) <= self.epsilon, axis=1)
        if self.U.shape[0]:
            ok &= np.all(eta @ self.U.T >= 0, axis=1)
        return ok

    def eq_stat_and_ineq(self, P: np.ndarray):
        """(max_j |E_j eta| / eps_j, U eta >= 0 flag) per draw.

        delta at tolerance scale c is (stat <= c) & ineq_ok, so one sample
        can be reweighted across a whole epsilon schedule.
        """
        eta = self.eta_reduced(P)
        if self.E.shape[0]:
            stat = np.max(np.abs(eta @ self.E.T) / self.epsilon, axis=1)
        else:
            stat = np.zeros(P.shape[0])
        ok = np.ones(P.shape[0], dtype=bool)
        if self.U.shape[0]:
            ok = np.all(eta @ self.U.T >= 0, axis=1)
        return stat, ok


# ---------------------------------------------------------------------------
# Proportion estimators
# ---------------------------------------------------------------------------

def estimate_proportion_direct(draws: np.ndarray, ev: ModelEval) -> ProportionEstimate:
    """Acceptance fraction of delta over explicit draws (n, s, r)."""
    if draws.ndim != 3 or draws.shape[0] < 1:
        raise EngineError("draws must be a non-empty (n, s, r) array")
    n = draws.shape[0]
    acc = int(ev.delta(draws).sum())
    p = acc / n
    se = float(np.sqrt(p * (1 - p) / n))
    return ProportionEstimate(
        value=p, n_draws=n, ess=float(acc), se=se, route="direct",
        log_value=float(np.log(p)) if p > 0 else -np.inf,
        rel_se=float(se / p) if p > 0 else np.inf, accepted=acc,
        warnings=[] if acc else ["rare event: no draws satisfied the constraints"],
    )


def _direct_stream(ev: ModelEval, alpha: np.ndarray, n: int, rng, chunk: int) -> ProportionEstimate:
    acc = 0
    done = 0
    while done < n:
        b = min(chunk, n - done)
        P = _dirichlet_chunk(rng, alpha, b)
        acc += int(ev.delta(P).sum())
        done += b
    p = acc / n
    se = float(np.sqrt(p * (1 - p) / n))
    return ProportionEstimate(
        value=p, n_draws=n, ess=float(acc), se=se, route="direct",
        log_value=float(np.log(p)) if p > 0 else -np.inf,
        rel_se=float(se / p) if p > 0 else np.inf, accepted=acc,
        warnings=[] if acc else ["rare event: no draws satisfied the constraints"],
    )


def _combine_ls(parts):
    return logsumexp(np.array(parts)) if parts else -np.inf


def _importance_stream(ev: ModelEval, target_alpha: np.ndarray, g: ImportanceDensity,
                       n: int, rng, chunk: int) -> ProportionEstimate:
    """mean of delta * p/g over n draws from g, all in log space."""
    coef_t, const_t = _logpdf_terms(target_alpha)
    coef_g, const_g = _logpdf_terms(g.params)
    dcoef = coef_t - coef_g                      # (s, r)
    dconst = const_t - const_g
    ls1, ls2 = [], []
    acc = 0
    max_lw = -np.inf
    done = 0
    while done < n:
        b = min(chunk, n - done)
        P = _dirichlet_chunk(rng, g.params, b)
        d = ev.delta(P)
        if np.any(d):
            logw = np.einsum("nsr,sr->n", np.log(P[d]), dcoef) + dconst
            ls1.append(logsumexp(logw))
            ls2.append(logsumexp(2.0 * logw))
            acc += int(d.sum())
            max_lw = max(max_lw, float(np.max(np.abs(logw))))
        done += b
    if acc == 0:
        return ProportionEstimate(
            value=0.0, n_draws=n, ess=0.0, se=0.0, route="importance",
            log_value=-np.inf, rel_se=np.inf, accepted=0,
            multiplier=g.multiplier, alpha=[float(a) for a in g.alpha],
            warnings=["rare event: no draws satisfied the constraints under g"],
        )
    l1 = _combine_ls(ls1)
    l2 = _combine_ls(ls2)
    log_value = l1 - np.log(n)
    ess = float(np.exp(2.0 * l1 - l2))
    rel_var = max(0.0, np.exp(l2 - 2.0 * l1 + np.log(n)) - 1.0) / n
    rel_se = float(np.sqrt(rel_var))
    value = float(np.exp(log_value))
    return ProportionEstimate(
        value=value, n_draws=n, ess=ess, se=value * rel_se, route="importance",
        log_value=float(log_value), rel_se=rel_se, accepted=acc,
        multiplier=g.multiplier, alpha=[float(a) for a in g.alpha],
        max_abs_log_weight=max_lw,
    )


# ---------------------------------------------------------------------------
# Importance density tuning
# ---------------------------------------------------------------------------

def make_density(center: np.ndarray, target_alpha: np.ndarray, multiplier: float,
                 center_kind: str = "custom") -> ImportanceDensity:
    conc = target_alpha.sum(axis=1)              # per-stratum target concentration
    params = multiplier * conc[:, None] * center
    return ImportanceDensity(params=params, alpha=multiplier * conc,
                             multiplier=float(multiplier), center=center,
                             center_kind=center_kind)


def tune_alpha(ev: ModelEval, target_alpha: np.ndarray, center: np.ndarray,
               settings: RunSettings, seed: int, center_kind: str = "custom",
               grid=None):
    """Pick the concentration multiplier with the best pilot ESS subject to
    an acceptance floor; extend the grid geometrically above its top when
    nothing on it reaches the floor.

    Returns (ImportanceDensity, diagnostics). Raises TuningError when no
    concentration, extended included, yields a single accepted draw.
    """
    grid = list(grid if grid is not None else settings.alpha_grid)
    if not grid or any(a <= 0 for a in grid):
        raise EngineError("alpha grid must be non-empty and positive")
    results = []

    probe_n = max(4000, settings.pilot_n // 4)

    def probe(mult, idx):
        g = make_density(center, target_alpha, mult, center_kind)
        est = _importance_stream(ev, target_alpha, g, probe_n,
                                 substream(seed, "tune", idx), settings.chunk)
        results.append({"multiplier": float(mult),
                        "acceptance": est.accepted / probe_n,
                        "ess": est.ess, "log_value": est.log_value})
        return est

    ests = [probe(m, i) for i, m in enumerate(grid)]
    qualifying = [(e.ess, m, e) for m, e in zip(grid, ests)
                  if e.accepted / probe_n >= settings.tune_accept_min]
    idx = len(grid)
    if not qualifying:
        mult = max(grid)
        extra_hits = 0
        while mult < settings.tune_extend_max_multiplier:
            mult *= settings.tune_extend_factor
            e = probe(mult, idx)
            idx += 1
            if e.accepted / probe_n >= settings.tune_accept_min:
                qualifying.append((e.ess, mult, e))
                extra_hits += 1
                if extra_hits >= 3:
                    break
            elif extra_hits:
                break
    if not qualifying:
        # fall back to the best raw acceptance if anything accepted at all
        best = max(results, key=lambda r: (r["acceptance"], r["ess"]))
        if best["acceptance"] > 0:
            g = make_density(center, target_alpha, best["multiplier"], center_kind)
            return g, {"grid": results, "chosen": best["multiplier"],
                       "fallback": "max-acceptance", "ess": best["ess"]}
        raise TuningError(
            "no pilot draw satisfied the constraints at any tuned concentration; "
            "increase pilot_n or improve the centring point"
        )
    ess_best = max(q[0] for q in qualifying)
    if ess_best >= 10.0 * settings.ess_floor:
        ess_pick, mult_best, _ = max(qualifying, key=lambda q: q[0])
    else:
        # degenerate regime: pilot ESS is too noisy to rank concentrations,
        # and wider proposals cover the unconstrained directions better, so
        # take the smallest concentration within a factor 3 of the best
        near_best = [q for q in qualifying if q[0] >= ess_best / 3.0]
        ess_pick, mult_best, _ = min(near_best, key=lambda q: q[1])
    g = make_density(center, target_alpha, mult_best, center_kind)
    return g, {"grid": results, "chosen": float(mult_best), "fallback": None,
               "ess": float(ess_pick)}


# ---------------------------------------------------------------------------
# Centring
# ---------------------------------------------------------------------------

def _centring_model(model: ModelSpec, side: str) -> ModelSpec:
    """Tolerance used by the centring fit for about-equality rows.

    The prior density is flat across the tube, so its centre belongs on the
    manifold (1% of the tolerance). The posterior is exponentially tilted
    across the tube whenever the data disagree with the constraint, so its
    centre is the constrained optimum pulled 30% inside the tube face;
    sitting exactly on the boundary would halve the acceptance per active
    row, sitting on the manifold would put the proposal where the
    posterior density is lowest and blow up the weight spread.
    """
    if model.constraints.n_eq == 0:
        return model
    frac = 0.01 if side == "prior" else 0.7
    return ModelSpec(model.name, model.logit_types,
                     model.constraints.scaled_epsilon(frac), model.notes)


def _centre(side: str, model: ModelSpec, table: StratifiedTable,
            settings: RunSettings, margin: float | None = None):
    """Importance-density centre per the side: the flat-likelihood interior
    point for the prior, the constrained MLE for the posterior."""
    fit_model = _centring_model(model, side)
    if side == "prior":
        m = settings.prior_margin if margin is None else margin
        res = fitmod.prior_center(fit_model, table.dims, table.s,
                                  fitmod.FitOptions(smoothing=settings.smoothing),
                                  interior_margin=m)
        return res.pi_hat, "prior_center"
    opts = fitmod.FitOptions(smoothing=settings.smoothing,
                             interior_margin=0.0 if margin is None else margin)
    res = fitmod.constrained_mle(table, fit_model, opts)
    return res.pi_hat, "constrained_mle"


def _tuned_density(side: str, ev: ModelEval, target_alpha, model, table,
                   settings: RunSettings, seed: int, grid=None):
    """Centre + tune, walking the interior-margin ladder until the pilot
    ESS looks healthy (or nothing works at any margin)."""
    margins = [None] + list(settings.margin_ladder)
    last_err = None
    best = None
    for j, margin in enumerate(margins):
        try:
            center, kind = _centre(side, model, table, settings, margin)
            g, diag = tune_alpha(ev, target_alpha, center, settings,
                                 seed + j, center_kind=kind, grid=grid)
            diag["margin"] = margin
        except (TuningError, fitmod.FitError) as err:
            last_err = err
            continue
        if best is None or diag.get("ess", 0.0) > best[1].get("ess", 0.0):
            best = (g, diag)
        if diag.get("ess", 0.0) >= 2.0 * settings.ess_floor:
            return g, diag
    if best is not None:
        return best
    raise last_err


def _sub_table(table: StratifiedTable, b: int) -> StratifiedTable:
    return StratifiedTable((table.strata[b],), (table.tables[b],))


def _seed_for(seed: int, side: str) -> int:
    # distinct tuning streams per side under one master seed
    return (int(seed) << 1) + _SIDES[side]


# ---------------------------------------------------------------------------
# Side estimates (proportion under prior or posterior)
# ---------------------------------------------------------------------------

def _combine_product(parts, n_draws: int) -> ProportionEstimate:
    """Product of independent per-stratum proportion estimates."""
    log_value = float(sum(p.log_value for p in parts))
    finite = np.isfinite(log_value)
    rel_se = float(np.sqrt(sum(min(p.rel_se, 1e6) ** 2 for p in parts))) if finite else np.inf
    value = float(np.exp(log_value)) if finite else 0.0
    routes = sorted({p.route for p in parts})
    warnings = [w for p in parts for w in p.warnings]
    mults = [p.multiplier for p in parts]
    return ProportionEstimate(
        value=value, n_draws=n_draws,
        ess=float(min(p.ess for p in parts)),
        se=value * rel_se if finite else 0.0,
        route="+".join(routes),
        log_value=log_value, rel_se=rel_se,
        accepted=int(min(p.accepted for p in parts)),
        multiplier=None if all(m is None for m in mults) else
        float(max(m for m in mults if m is not None)),
        alpha=[float(a) for p in parts if p.alpha for a in p.alpha] or None,
        max_abs_log_weight=float(max(p.max_abs_log_weight for p in parts)),
        warnings=warnings,
    )


def _side_estimate_one(side, ev, target_alpha, model, table, settings, seed, path):
    """Pilot-routed estimate over one (possibly joint) evaluation unit."""
    if ev.cs.is_empty():
        return ProportionEstimate(value=1.0, n_draws=settings.n_draws,
                                  ess=float(settings.n_draws), se=0.0, route="direct",
                                  log_value=0.0, rel_se=0.0, accepted=settings.n_draws)
    pilot = _direct_stream(ev, target_alpha, settings.pilot_n,
                           substream(seed, side, "pilot", *path), settings.chunk)
    if pilot.value >= settings.direct_threshold:
        return _direct_stream(ev, target_alpha, settings.n_draws,
                              substream(seed, side, "main", *path), settings.chunk)
    g, diag = _tuned_density(side, ev, target_alpha, model, table, settings,
                             _seed_for(seed, side) + 131 * (path[0] + 1 if path else 0))
    est = _importance_stream(ev, target_alpha, g, settings.n_draws,
                             substream(seed, side, "main", *path), settings.chunk)
    if diag.get("fallback"):
        est.warnings.append(f"tuner fell back to {diag['fallback']}")
    return est


def _side_estimate(side: str, ev: ModelEval, target_alpha, model, table,
                   settings: RunSettings, seed: int) -> ProportionEstimate:
    """Route selection per the pilot acceptance; stratum-separable models
    factorise into independent per-stratum estimates."""
    subs = ev.stratum_split()
    if subs is None:
        return _side_estimate_one(side, ev, target_alpha, model, table,
                                  settings, seed, path=())
    parts = []
    for b, ev_b in enumerate(subs):
        est_b = _side_estimate_one(side, ev_b, target_alpha[b:b + 1], ev_b.model,
                                   _sub_table(table, b), settings, seed, path=(b,))
        parts.append(est_b)
    return _combine_product(parts, settings.n_draws)


def importance_estimate(model: ModelSpec, table: StratifiedTable, prior: PriorSpec,
                        target: str, n: int, seed: int,
                        settings: RunSettings | None = None,
                        g: ImportanceDensity | None = None) -> ProportionEstimate:
    """Importance-sampled constraint-satisfaction proportion under the
    encompassing prior or posterior; centres and tunes g automatically
    (per stratum when the model factorises) unless g is supplied."""
    if target not in _SIDES:
        raise EngineError(f"target must be 'prior' or 'posterior', got {target!r}")
    settings = settings or RunSettings()
    ev = ModelEval(model, table.dims, table.s)
    target_alpha = prior.concentration if target == "prior" else prior.posterior(table)
    if g is not None:
        return _importance_stream(ev, target_alpha, g, n,
                                  substream(seed, target, "main"), settings.chunk)
    subs = ev.stratum_split()
    if subs is None:
        gg, _ = _tuned_density(target, ev, target_alpha, model, table, settings,
                               _seed_for(seed, target))
        return _importance_stream(ev, target_alpha, gg, n,
                                  substream(seed, target, "main"), settings.chunk)
    parts = []
    for b, ev_b in enumerate(subs):
        gg, _ = _tuned_density(target, ev_b, target_alpha[b:b + 1], ev_b.model,
                               _sub_table(table, b), settings,
                               _seed_for(seed, target) + 131 * (b + 1))
        parts.append(_importance_stream(ev_b, target_alpha[b:b + 1], gg, n,
                                        substream(seed, target, "main", b),
                                        settings.chunk))
    return _combine_product(parts, n)


# ---------------------------------------------------------------------------
# Bayes factors: plain proportion ratio (inequality-only models)
# ---------------------------------------------------------------------------

def estimate_bf(model: ModelSpec, table: StratifiedTable, prior: PriorSpec,
                settings: RunSettings, seed: int) -> BFEstimate:
    """log Bayes factor of an inequality-constrained model versus the
    encompassing model: posterior over prior satisfaction proportions."""
    if model.constraints.n_eq:
        raise EngineError(
            f"model {model.name!r} has about-equality rows; use about_equality_bf"
        )
    ev = ModelEval(model, table.dims, table.s)
    post_alpha = prior.posterior(table)
    c_side = _side_estimate("prior", ev, prior.concentration, model, table, settings, seed)
    d_side = _side_estimate("posterior", ev, post_alpha, model, table, settings, seed)
    for side, est in (("prior", c_side), ("posterior", d_side)):
        if est.value == 0.0 and est.ess == 0.0:
            raise UnboundedEstimateError(side)
    ln_bf = d_side.log_value - c_side.log_value
    log10 = ln_bf / LN10
    return BFEstimate(
        log10_bf=float(log10), ln_bf=float(ln_bf),
        replicates=[float(log10)], mean=float(log10), sd=0.0,
        route=f"{c_side.route}/{d_side.route}",
        components={"prior": c_side.to_dict(), "posterior": d_side.to_dict(),
                    "model": model.name},
        settings={"seed": int(seed), **settings.to_dict()},
    )


# ---------------------------------------------------------------------------
# Shrinking chains (about-equality models and nested model pairs)
# ---------------------------------------------------------------------------

class _ChainPart:
    """One reweightable importance sample for a chain: per-draw log-weights
    plus the equality statistics and inequality flags of the numerator (and
    optionally denominator) constraint systems, all expressed relative to
    the stage-1 tolerances so one sample serves every level."""

    def __init__(self, side, num_model, den_model, target_alpha, table,
                 settings, seed, path):
        self.side = side
        self.settings = settings
        self.seed = seed
        self.path = path
        self.table = table
        self.target_alpha = target_alpha
        self.num_model = num_model          # constraints at stage-1 epsilon
        self.den_model = den_model          # or None for vs-encompassing
        self.draw_key = 0
        self.diag = None
        self._draw(scale=1.0)

    def _scaled(self, model, scale):
        cs = model.constraints
        if cs.n_eq == 0 or scale == 1.0:
            return model
        return ModelSpec(model.name, model.logit_types,
                         cs.with_epsilon(cs.epsilon * scale), model.notes)

    def _draw(self, scale):
        """Tune on the numerator region at the current tolerance scale and
        draw a fresh sample; stats stay normalised to stage-1 epsilon."""
        num_now = self._scaled(self.num_model, scale)
        ev_now = ModelEval(num_now, self.table.dims, self.table.s)
        grid = None
        if getattr(self, "g", None) is not None:
            m = self.g.multiplier
            grid = [m * f for f in (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)]
        g, diag = _tuned_density(self.side, ev_now, self.target_alpha, num_now,
                                 self.table, self.settings,
                                 _seed_for(self.seed, self.side)
                                 + 131 * (self.path[0] + 1 if self.path else 0)
                                 + 977 * self.draw_key, grid=grid)
        coef_t, const_t = _logpdf_terms(self.target_alpha)
        coef_g, const_g = _logpdf_terms(g.params)
        dcoef, dconst = coef_t - coef_g, const_t - const_g
        rng = substream(self.seed, self.side, "main", *self.path, self.draw_key)
        n = self.settings.n_draws
        ev_num = ModelEval(self.num_model, self.table.dims, self.table.s)
        ev_den = ModelEval(self.den_model, self.table.dims, self.table.s) \
            if self.den_model is not None else None
        logw = np.empty(n)
        stat_n = np.empty(n)
        ineq_n = np.empty(n, dtype=bool)
        stat_d = np.empty(n) if ev_den is not None else None
        ineq_d = np.empty(n, dtype=bool) if ev_den is not None else None
        done = 0
        while done < n:
            b = min(self.settings.chunk, n - done)
            P = _dirichlet_chunk(rng, g.params, b)
            logw[done:done + b] = np.einsum("nsr,sr->n", np.log(P), dcoef) + dconst
            st, ok = ev_num.eq_stat_and_ineq(P)
            stat_n[done:done + b] = st
            ineq_n[done:done + b] = ok
            if ev_den is not None:
                st_d, ok_d = ev_den.eq_stat_and_ineq(P)
                stat_d[done:done + b] = st_d
                ineq_d[done:done + b] = ok_d
            done += b
        self.logw, self.stat_n, self.ineq_n = logw, stat_n, ineq_n
        self.stat_d, self.ineq_d = stat_d, ineq_d
        self.g = g
        self.diag = diag
        self.max_abs_logw = float(np.max(np.abs(logw)))

    def _logprop(self, stat, ineq, scale):
        d = (stat <= scale) & ineq
        if not np.any(d):
            return -np.inf, 0.0
        lw = self.logw[d]
        l1 = logsumexp(lw)
        l2 = logsumexp(2.0 * lw)
        return float(l1 - np.log(self.settings.n_draws)), float(np.exp(2.0 * l1 - l2))

    def level(self, scale):
        """(ln value, ess) at a tolerance scale: the numerator proportion,
        or the numerator/denominator ratio for a model pair."""
        ln_n, ess_n = self._logprop(self.stat_n, self.ineq_n, scale)
        if self.den_model is None:
            return ln_n, ess_n
        ln_d, ess_d = self._logprop(self.stat_d, self.ineq_d, scale)
        return ln_n - ln_d, min(ess_n, ess_d)

    def level_count(self, scale):
        """Accepted draws at the tolerance scale (numerator region)."""
        return int(((self.stat_n <= scale) & self.ineq_n).sum())

    def ensure(self, scale):
        """Retune and redraw at the current tolerance when the level has
        too few accepted draws or too little weighted ESS; returns True if
        a redraw happened. Stage factors difference the common weight noise
        away on shared draws, so the accepted count is the binding
        requirement."""
        _, ess = self.level(scale)
        healthy = (self.level_count(scale) >= max(200, int(0.02 * self.settings.n_draws))
                   and ess >= self.settings.ess_floor)
        if healthy or self.draw_key >= self.settings.max_retunes:
            return False
        self.draw_key += 1
        self._draw(scale)
        return True


def _chain_bf(num_model: ModelSpec, den_model, table: StratifiedTable,
              prior: PriorSpec, schedule: EpsilonSchedule, settings: RunSettings,
              seed: int, route: str) -> BFEstimate:
    """Common chain driver: per-side reweightable samples, geometric
    tolerance levels, telescoped stage factors with exact bookkeeping."""
    post_alpha = prior.posterior(table)
    targets = {"prior": prior.concentration, "posterior": post_alpha}
    n_eq = num_model.constraints.n_eq + (den_model.constraints.n_eq if den_model else 0)

    sides = {}
    for side in ("prior", "posterior"):
        parts = None
        if den_model is None:
            ev1 = ModelEval(num_model, table.dims, table.s)
            subs = ev1.stratum_split()
            if subs is not None:
                parts = [_ChainPart(side, e.model, None, targets[side][b:b + 1],
                                    _sub_table(table, b), settings, seed, (b,))
                         for b, e in enumerate(subs)]
        if parts is None:
            parts = [_ChainPart(side, num_model, den_model, targets[side],
                                table, settings, seed, ())]
        sides[side] = parts

    def side_level(side, scale):
        vals = [p.level(scale) for p in sides[side]]
        ln = float(sum(v[0] for v in vals))
        ess = float(min(v[1] for v in vals))
        return ln, ess

    # retunes aim for healthy levels; a level stays usable down to a small
    # accepted-draw count because the stage factors difference the common
    # weight noise away on shared draws
    count_floor = 50
    max_levels = schedule.max_stages if n_eq else 1
    stage_log10 = []
    stage_info = []
    truncated = False
    warnings = []
    prev = {}
    for level in range(1, max_levels + 1):
        scale = schedule.b ** (level - 1)
        cur = {}
        redrawn = {s: False for s in sides}
        for side in sides:
            for p in sides[side]:
                if p.ensure(scale):
                    redrawn[side] = True
            cur[side] = side_level(side, scale)
        if (redrawn["prior"] or redrawn["posterior"]) and level > 1:
            # same-sample differencing: refresh the previous level too
            prev = {s: side_level(s, schedule.b ** (level - 2)) for s in sides}
        counts = {s: min(p.level_count(scale) for p in sides[s]) for s in sides}
        bad = [s for s in cur if not np.isfinite(cur[s][0]) or counts[s] < count_floor]
        if bad:
            if level == 1:
                side_bad = bad[0]
                if not np.isfinite(cur[side_bad][0]):
                    raise UnboundedEstimateError(side_bad)
            else:
                truncated = True
                break
        weak = [s for s in cur if cur[s][1] < settings.ess_floor]
        if weak:
            warnings.append(
                f"level {level}: ESS under {settings.ess_floor:g} on "
                + "/".join(weak) + " side")
        if level == 1:
            ln_stage = cur["posterior"][0] - cur["prior"][0]
        else:
            ln_stage = (cur["posterior"][0] - prev["posterior"][0]) \
                - (cur["prior"][0] - prev["prior"][0])
        stage_log10.append(ln_stage / LN10)
        stage_info.append({
            "level": level,
            "epsilon_scale": scale,
            "log10_stage": ln_stage / LN10,
            "prior_ln": cur["prior"][0], "prior_ess": cur["prior"][1],
            "posterior_ln": cur["posterior"][0], "posterior_ess": cur["posterior"][1],
        })
        prev = dict(cur)
        if level == 1 and bad:
            truncated = True
            break
        if level > 1 and abs(ln_stage / LN10) < schedule.stop_tol:
            break

    log10 = float(sum(stage_log10))
    final_scale = stage_info[-1]["epsilon_scale"] if stage_info else 1.0
    eps1 = num_model.constraints.epsilon
    comp = {
        "model": num_model.name,
        "reference": den_model.name if den_model else "encompassing",
        "stages": stage_info,
        "stage_log10s": [float(v) for v in stage_log10],
        "final_epsilon": [float(e) for e in eps1 * final_scale],
        "truncated": truncated,
        "warnings": warnings,
        "tuning": {side: [p.diag for p in sides[side]] for side in sides},
        "retunes": {side: [p.draw_key for p in sides[side]] for side in sides},
        "max_abs_log_weight": {side: max(p.max_abs_logw for p in sides[side])
                               for side in sides},
    }
    return BFEstimate(
        log10_bf=log10, ln_bf=log10 * LN10,
        replicates=[log10], mean=log10, sd=0.0,
        route=route,
        components=comp,
        settings={"seed": int(seed), "schedule": asdict(schedule), **settings.to_dict()},
    )


def about_equality_bf(model: ModelSpec, table: StratifiedTable, prior: PriorSpec,
                      schedule: EpsilonSchedule, settings: RunSettings,
                      seed: int) -> BFEstimate:
    """Shrinking-tolerance Bayes factor for a model with about-equality
    rows: one tuned importance sample per side (per stratum when the model
    factorises), reweighted across the geometric epsilon levels; the
    reported value is the exact sum of the stored stage logs.

    A side whose level ESS decays under the floor is re-tuned at the
    current tolerance and redrawn; if the floor still cannot be held the
    chain stops early and flags truncation.
    """
    if model.constraints.n_eq == 0:
        raise EngineError(f"model {model.name!r} has no equality rows; use estimate_bf")
    eps1 = np.full(model.constraints.n_eq, schedule.epsilon_start) \
        if np.isscalar(schedule.epsilon_start) else np.asarray(schedule.epsilon_start)
    model1 = ModelSpec(model.name, model.logit_types,
                       model.constraints.with_epsilon(eps1), model.notes)
    return _chain_bf(model1, None, table, prior, schedule, settings, seed,
                     route="about_equality")


def nested_bf(model_num: ModelSpec, model_den: ModelSpec, table: StratifiedTable,
              prior: PriorSpec, settings: RunSettings, seed: int,
              schedule: EpsilonSchedule | None = None) -> BFEstimate:
    """log Bayes factor of a model against a coarser model it refines,
    estimated from common draws so the shared constraint-satisfaction
    factors cancel inside each side's ratio.

    The caller guarantees the nesting (model_num's constraints imply
    model_den's). Equality tolerances of both models shrink on the common
    schedule; with no equality rows anywhere this is a single-level run.
    """
    if tuple(model_num.logit_types) != tuple(model_den.logit_types):
        raise EngineError("nested models must share logit types")
    schedule = schedule or EpsilonSchedule()

    def at_eps1(m):
        if m.constraints.n_eq == 0:
            return m
        eps1 = np.full(m.constraints.n_eq, schedule.epsilon_start)
        return ModelSpec(m.name, m.logit_types,
                         m.constraints.with_epsilon(eps1), m.notes)

    return _chain_bf(at_eps1(model_num), at_eps1(model_den), table, prior,
                     schedule, settings, seed, route="nested")


def bayes_factor(model: ModelSpec, table: StratifiedTable, prior: PriorSpec,
                 settings: RunSettings, seed: int,
                 schedule: EpsilonSchedule | None = None) -> BFEstimate:
    """Dispatch on constraint content: the shrinking chain when equality
    rows are present, the plain proportion ratio otherwise."""
    if model.constraints.n_eq:
        return about_equality_bf(model, table, prior, schedule or EpsilonSchedule(),
                                 settings, seed)
    return estimate_bf(model, table, prior, settings, seed)


def replicate_bf(model: ModelSpec, table: StratifiedTable, prior: PriorSpec,
                 settings: RunSettings, B: int, seed: int,
                 schedule: EpsilonSchedule | None = None,
                 reference: ModelSpec | None = None) -> BFEstimate:
    """B independently seeded runs; the reported point estimate is the
    replicate mean of the log Bayes factors. With a reference model the
    runs use the common-draw nested-pair route."""
    if B < 1:
        raise EngineError("need B >= 1 replicates")
    reps = []
    infos = []
    for i in range(B):
        rep_seed = int(np.random.SeedSequence(int(seed), spawn_key=(3, i)).generate_state(1)[0])
        if reference is not None:
            est = nested_bf(model, reference, table, prior, settings, rep_seed, schedule)
        else:
            est = bayes_factor(model, table, prior, settings, rep_seed, schedule)
        reps.append(est.log10_bf)
        info = {"log10_bf": est.log10_bf, "route": est.route, "seed": rep_seed}
        if est.route in ("about_equality", "nested"):
            info["final_epsilon"] = est.components["final_epsilon"]
            info["truncated"] = est.components["truncated"]
            info["n_stages"] = len(est.components["stages"])
        infos.append(info)
    mean = float(np.mean(reps))
    sd = float(np.std(reps, ddof=1)) if B > 1 else 0.0
    return BFEstimate(
        log10_bf=mean, ln_bf=mean * LN10, replicates=[float(v) for v in reps],
        mean=mean, sd=sd, route=infos[0]["route"],
        components={"model": model.name, "replicates": infos, "B": B},
        settings={"seed": int(seed), "B": B,
                  **({"schedule": asdict(schedule)} if schedule else {}),
                  **settings.to_dict()},
    )


def compare_models(bf_k: BFEstimate, bf_l: BFEstimate) -> float:
    """log10 B_kl from the two encompassing-referenced estimates."""
    return float(bf_k.log10_bf - bf_l.log10_bf)


def jeffreys_label(log_bf: float) -> str:
    """Evidence label at thresholds 0.5 / 1 / 2 on |log BF|; the direction
    (for or against) is reported separately by callers."""
    a = abs(log_bf)
    if a < 0.5:
        return "poor"
    if a < 1.0:
        return "substantial"
    if a < 2.0:
        return "strong"
    return "decisive"


# ---------------------------------------------------------------------------
# Posterior draws under an accepted model
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSummary:
    n_drawn: int
    n_accepted: int
    acceptance: float
    pi_mean: np.ndarray            # (s, r)
    pi_lo: np.ndarray
    pi_hi: np.ndarray
    eta_mean: np.ndarray           # (s*t,)
    eta_lo: np.ndarray
    eta_hi: np.ndarray
    mean_satisfies: bool
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("pi_mean", "pi_lo", "pi_hi", "eta_mean", "eta_lo", "eta_hi"):
            d[k] = getattr(self, k).tolist()
        return d


def posterior_draws_under_model(model: ModelSpec, table: StratifiedTable,
                                prior: PriorSpec, n: int, seed: int,
                                chunk: int = 32768, keep_cap: int = 200_000,
                                level: float = 0.95) -> PosteriorSummary:
    """Accepted encompassing-posterior draws and their summaries.

    Stores up to keep_cap accepted draws for the quantile summaries; a
    rare-event warning is attached when almost nothing is accepted.
    """
    ev = ModelEval(model, table.dims, table.s)
    link = ev.link
    alpha = prior.posterior(table)
    rng = substream(seed, 0)
    kept = []
    acc = 0
    done = 0
    while done < n:
        b = min(chunk, n - done)
        P = _dirichlet_chunk(rng, alpha, b)
        d = ev.delta(P) if not ev.cs.is_empty() else np.ones(b, dtype=bool)
        acc += int(d.sum())
        if np.any(d) and acc <= keep_cap:
            kept.append(P[d])
        done += b
    warnings = []
    if acc == 0:
        raise UnboundedEstimateError(
            "posterior", "no posterior draw satisfied the model constraints; "
            "an about-equality schedule is the usual remedy for equality-type models")
    frac = acc / n
    if frac < 1e-3:
        warnings.append(
            f"acceptance {frac:.2e} is tiny; summaries rest on few draws and an "
            "about-equality route is likely more appropriate")
    P = np.concatenate(kept, axis=0)
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    eta = np.concatenate([eta_batch(P[:, b, :], link) for b in range(table.s)], axis=1)
    mean_pi = P.mean(axis=0)
    mean_sat = bool(ev.delta(mean_pi[None, :, :])[0]) if not ev.cs.is_empty() else True
    return PosteriorSummary(
        n_drawn=n, n_accepted=acc, acceptance=frac,
        pi_mean=mean_pi, pi_lo=np.quantile(P, lo_q, axis=0), pi_hi=np.quantile(P, hi_q, axis=0),
        eta_mean=eta.mean(axis=0), eta_lo=np.quantile(eta, lo_q, axis=0),
        eta_hi=np.quantile(eta, hi_q, axis=0),
        mean_satisfies=mean_sat, warnings=warnings,
    )
