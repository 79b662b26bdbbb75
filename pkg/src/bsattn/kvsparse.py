"""KV-side sparsification over pooled block scores.

For each query block a statistical threshold ``mean + std * U(1 - k/n)`` is
derived from its row of block scores (``U`` is the standard normal quantile),
and the minimal set of KV blocks whose softmax mass reaches a target is
selected.  Two readings of how the threshold feeds the mass target exist:

``two_stage``
    The threshold is applied to raw block scores to pick candidate blocks
    (roughly ``k`` of them); the minimal set reaching mass ``tau`` is then taken
    over the softmax restricted to those candidates.  Selection grows with k.
``unified_prob``
    The threshold is computed over the softmax-normalized row itself, clamped
    to (0, 1], and used directly as the mass target.  Selection shrinks as k
    grows, because a larger k lowers the target.
"""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from ._kernels import scores as _dot_scores
from ._kernels import softmax_rows
from .errors import ConfigError, InvalidShape

MODES = ("two_stage", "unified_prob")
DEFAULT_MODE = "two_stage"
DEFAULT_TAU = 0.9

# Wichura (1988), algorithm AS 241 (PPND16); relative accuracy about 1e-16.
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
      45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
      1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
      0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15)


def _poly(coeffs, x):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def normal_quantile(u: float) -> float:
    """Inverse standard normal CDF."""
    u = float(u)
    if not 0.0 < u < 1.0:
        raise ConfigError(f"quantile argument must lie in (0, 1), got {u}")
    q = u - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = u if q < 0 else 1.0 - u
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        z = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        z = _poly(_E, r) / _poly(_F, r)
    return -z if q < 0 else z


def pooled_scores(Q_c, K_c, d_k: int | None = None) -> np.ndarray:
    """Block-level scores ``Q_c K_c^T / sqrt(d_k)`` (float64, shape (N_q, N_k))."""
    Q_c = np.asarray(Q_c, dtype=np.float64)
    K_c = np.asarray(K_c, dtype=np.float64)
    if Q_c.ndim != 2 or K_c.ndim != 2 or Q_c.shape[1] != K_c.shape[1]:
        raise InvalidShape(f"incompatible pooled shapes {Q_c.shape} and {K_c.shape}")
    d = Q_c.shape[1] if d_k is None else int(d_k)
    if d < 1 or Q_c.shape[1] == 0:
        raise InvalidShape("head dimension must be >= 1")
    return _dot_scores(Q_c, K_c) / math.sqrt(d)


def quantile_argument(k: float, n: int) -> float:
    """``1 - k/n`` clamped to ``[1/(2n), 1 - 1/(2n)]``."""
    lo = 1.0 / (2 * n)
    return min(max(1.0 - k / n, lo), 1.0 - lo)


def dynamic_threshold(row, k: float, probability: bool = False) -> float:
    """``mean(row) + std(row) * U(1 - k/n)`` with population std.

    With ``probability=True`` the row is expected to be a probability vector and
    the result is clamped to (0, 1] so it can serve as a mass target.
    """
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[0]
    if row.ndim != 1 or n == 0:
        raise InvalidShape(f"expected a non-empty 1-D row, got shape {row.shape}")
    if not 1 <= k <= n:
        raise ConfigError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    mean = float(np.mean(row))
    std = float(np.sqrt(np.mean((row - mean) ** 2)))
    p = mean + std * normal_quantile(quantile_argument(k, n))
    if probability:
        p = min(max(p, np.finfo(np.float64).tiny), 1.0)
    return p


def _reaches(values, p: float) -> bool:
    """Whether the exact sum of ``values`` is at least ``p``."""
    total = math.fsum(values)
    if total != p:
        # fsum is correctly rounded, so a strict inequality carries over
        return total > p
    return sum(map(Fraction, values.tolist()), Fraction(0)) >= Fraction(p)


def select_min_index_set(prob_row, p: float) -> np.ndarray:
    """Smallest set of ids whose probability mass reaches ``p`` (ascending ids).

    Entries are taken in descending probability, lower id first on ties, until
    the running sum reaches ``p``.  ``p >= 1`` returns every id with nonzero
    probability, as does a target the row cannot reach through rounding.
    """
    prob = np.asarray(prob_row, dtype=np.float64)
    if prob.ndim != 1 or prob.shape[0] == 0:
        raise InvalidShape(f"expected a non-empty 1-D row, got shape {prob.shape}")
    if not p > 0:
        raise ConfigError(f"mass target must be > 0, got {p}")
    if np.any(prob < 0):
        raise ConfigError("probabilities must be non-negative")
    ids = np.arange(prob.shape[0])
    nonzero = ids[prob > 0]
    if p >= 1.0:
        return nonzero if len(nonzero) else ids[:1]
    order = np.lexsort((ids, -prob))
    ranked = prob[order]
    csum = np.cumsum(ranked)
    m = int(np.searchsorted(csum, p, side="left")) + 1
    # the float running sum can land on the wrong side of p; settle the boundary exactly
    while m > 1 and _reaches(ranked[:m - 1], p):
        m -= 1
    while m <= len(order) and not _reaches(ranked[:m], p):
        m += 1
    if m > len(order):
        return nonzero
    return np.sort(order[:m])


@dataclass(eq=False)
class Q2KMap:
    """Per-query-block KV block lists, as consumed by a block-sparse kernel.

    ``thresholds[i]`` is the value actually used for row i: the mass target in
    ``unified_prob`` mode, the raw-score cut in ``two_stage`` mode (``-inf``
    when every block is a candidate).
    """

    q2k_num: np.ndarray
    q2k_index: list
    thresholds: np.ndarray
    mode: str
    k: float
    n: int
    tau: float | None = None
    candidates: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_query_blocks(self) -> int:
        return len(self.q2k_num)

    @property
    def keep_fraction(self) -> float:
        return float(np.sum(self.q2k_num)) / (self.n_query_blocks * self.n)

    def to_dict(self) -> dict:
        out = {
            "q2k_num": [int(x) for x in self.q2k_num],
            "q2k_index": [[int(j) for j in row] for row in self.q2k_index],
            "mode": self.mode,
            "k": float(self.k),
            "n": int(self.n),
            "tau": self.tau,
            "thresholds": [None if not math.isfinite(t) else float(t) for t in self.thresholds],
            "keep_fraction": self.keep_fraction,
        }
        return out


def select_all_q2k(n_query_blocks: int, n: int) -> Q2KMap:
    """Every query block attends every KV block (dense at block granularity)."""
    index = [np.arange(n, dtype=np.int64) for _ in range(n_query_blocks)]
    return Q2KMap(
        q2k_num=np.full(n_query_blocks, n, dtype=np.int64), q2k_index=index,
        thresholds=np.full(n_query_blocks, -np.inf), mode="select_all", k=float(n), n=n,
    )


def build_q2k(scores, k: float, mode: str = DEFAULT_MODE, tau: float = DEFAULT_TAU) -> Q2KMap:
    """Select KV blocks for every row of a block-score matrix.

    ``k`` may be fractional; it only enters through the quantile argument.
    """
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] == 0:
        raise InvalidShape(f"expected an (N_q, N) score matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidShape("block scores must be finite")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    n = S.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if mode == "two_stage" and not 0 < tau <= 1:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")

    probs = softmax_rows(S)
    index, thresholds, n_cand = [], [], []
    for i, row in enumerate(S):
        if mode == "unified_prob":
            p = dynamic_threshold(probs[i], k, probability=True)
            sel = select_min_index_set(probs[i], p)
            n_cand.append(n)
        else:
            if k >= n:
                p = -np.inf
                cand = np.arange(n)
            else:
                p = dynamic_threshold(row, k)
                cand = np.flatnonzero(row >= p)
                if len(cand) == 0:
                    cand = np.array([int(np.argmax(row))])
            sub = softmax_rows(row[cand])
            sel = cand[select_min_index_set(sub, tau)]
            n_cand.append(len(cand))
        index.append(np.asarray(sel, dtype=np.int64))
        thresholds.append(p)
    return Q2KMap(
        q2k_num=np.array([len(s) for s in index], dtype=np.int64), q2k_index=index,
        thresholds=np.array(thresholds, dtype=np.float64), mode=mode, k=float(k), n=n,
        tau=tau if mode == "two_stage" else None, candidates=np.array(n_cand, dtype=np.int64),
    )


def calibrate_k(scores, target_keep: float, mode: str = DEFAULT_MODE, tau: float = DEFAULT_TAU,
                iters: int = 60) -> Q2KMap:
    """Search a continuous k in [1, n] whose selection keeps ``target_keep`` of all blocks.

    The kept fraction is monotone in k (increasing for ``two_stage``, decreasing
    for ``unified_prob``), so bisection applies; the bracket end closest to the
    target is returned.  Targets outside the reachable range saturate.
    """
    S = np.asarray(scores, dtype=np.float64)
    n = S.shape[1]
    if not 0 < target_keep <= 1:
        raise ConfigError(f"target keep fraction must be in (0, 1], got {target_keep}")
    lo, hi = 1.0, float(n)
    m_lo, m_hi = build_q2k(S, lo, mode, tau), build_q2k(S, hi, mode, tau)
    increasing = m_hi.keep_fraction >= m_lo.keep_fraction
    for _ in range(iters):
        if hi - lo <= 1e-9 * n:
            break
        mid = 0.5 * (lo + hi)
        m_mid = build_q2k(S, mid, mode, tau)
        below = m_mid.keep_fraction < target_keep
        if below == increasing:
            lo, m_lo = mid, m_mid
        else:
            hi, m_hi = mid, m_mid
    return min((m_lo, m_hi), key=lambda m: (abs(m.keep_fraction - target_keep), m.k))
