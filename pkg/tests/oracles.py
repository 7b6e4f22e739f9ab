"""Independent reference implementations used as test oracles.

Everything here computes from first principles (marginal sums and the
textbook logit/log-odds definitions, recursive contrasts for higher
interactions) without touching the package's matrix machinery.
"""
from __future__ import annotations

import numpy as np


def marginal(pi_nd: np.ndarray, keep: tuple) -> np.ndarray:
    """Marginal of a q-way probability array over the kept axes."""
    drop = tuple(i for i in range(pi_nd.ndim) if i not in keep)
    return pi_nd.sum(axis=drop) if drop else pi_nd


def _den_num_weights(m: int, kind: str):
    """Per-category aggregation masks (denominator, numerator) for each
    cut a = 1..m-1, straight from the definitions."""
    dens, nums = [], []
    for a in range(1, m):
        den = np.zeros(m)
        num = np.zeros(m)
        if kind == "local":
            den[a - 1] = 1
            num[a] = 1
        elif kind == "global":
            den[:a] = 1
            num[a:] = 1
        elif kind == "continuation":
            den[a - 1] = 1
            num[a:] = 1
        elif kind == "reverse_continuation":
            den[:a] = 1
            num[a] = 1
        else:
            raise ValueError(kind)
        dens.append(den)
        nums.append(num)
    return dens, nums


def interaction_block(pi_nd: np.ndarray, active: tuple, kinds: tuple) -> np.ndarray:
    """The eta block for one margin set, by recursive contrasts.

    Order 1 is the plain logit; order k contrasts the conditional order
    k-1 interaction between the numerator and denominator regions of the
    first active variable. Rows come out with the last active variable's
    cut index fastest.
    """
    sub = marginal(pi_nd, active)
    kind_list = [kinds[i] for i in active]

    def rec(arr: np.ndarray, kinds_l: list) -> np.ndarray:
        m = arr.shape[0]
        dens, nums = _den_num_weights(m, kinds_l[0])
        if arr.ndim == 1:
            return np.array([np.log(num @ arr) - np.log(den @ arr)
                             for den, num in zip(dens, nums)])
        out = []
        for den, num in zip(dens, nums):
            arr_num = np.tensordot(num, arr, axes=(0, 0))
            arr_den = np.tensordot(den, arr, axes=(0, 0))
            out.append(rec(arr_num, kinds_l[1:]) - rec(arr_den, kinds_l[1:]))
        return np.stack(out)

    return rec(sub, kind_list).ravel()


def eta_reference(pi: np.ndarray, dims: tuple, kinds: tuple) -> np.ndarray:
    """Full eta vector: all margin sets in {A1},{A2},{A1,A2},{A3},... order."""
    q = len(dims)
    pi_nd = np.asarray(pi, dtype=float).reshape(dims)
    parts = []
    for k in range(1, 2 ** q):
        active = tuple(i for i in range(q) if (k >> i) & 1)
        parts.append(interaction_block(pi_nd, active, kinds))
    return np.concatenate(parts)


def lex_cells(dims):
    """All cells in lexicographic order, last variable fastest, by
    explicit enumeration."""
    cells = [()]
    for m in dims:
        cells = [c + (a,) for c in cells for a in range(1, m + 1)]
    return cells


def independence_mle(counts_2d: np.ndarray) -> np.ndarray:
    """Closed-form bivariate independence MLE: outer product of margins."""
    n = counts_2d.sum()
    return np.outer(counts_2d.sum(axis=1), counts_2d.sum(axis=0)) / n ** 2
