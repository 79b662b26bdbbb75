"""Query-side sparsification.

Within each unit (a block, or a window of a block) tokens are ranked by
dissimilarity to the unit's center token, ``1 - cos(q_center, q_i)``, in
descending order, and the top ``ceil(r * unit_size)`` are kept.  Ties go to the
lower global token id.  Every pruned token is assigned a donor: the retained
token of the same unit it is most similar to, whose attention output it reuses
when the sequence is restored to full length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import seq_dot
from .blocks import BlockSpec, unit_tokens
from .errors import ConfigError, InvalidShape

SENTINEL = -1
METRICS = ("cosine", "dot")
# guards ceil() against r*count landing a hair above an integer, e.g. 0.3*10
_CEIL_EPS = 1e-9


def center_offset(dims) -> int:
    """Local row-major offset of the floor-midpoint of an ``(a, b, c)`` box."""
    a, b, c = (int(x) for x in dims)
    return (a // 2) * b * c + (b // 2) * c + c // 2


def retained_count(r: float, count: int) -> int:
    return max(1, math.ceil(r * count - _CEIL_EPS))


def _cosine(dots, ss_a, ss_b):
    # sqrt(x*x) == x exactly in IEEE arithmetic, so identical rows give cos == 1.0
    denom = np.sqrt(ss_a * ss_b)
    zero = denom == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
    return np.clip(cos, -1.0, 1.0), zero


def dissimilarity_scores(Qblk, center_row, metric: str = "cosine") -> np.ndarray:
    """Per-row dissimilarity to ``center_row``.

    ``cosine``: ``1 - cos``; rows with zero norm get cosine 0 (score 1).
    ``dot``: negated dot product, which ranks identically to a similarity.
    """
    Qblk = np.asarray(Qblk, dtype=np.float64)
    center = np.asarray(center_row, dtype=np.float64)
    if Qblk.ndim != 2 or center.shape != (Qblk.shape[1],):
        raise InvalidShape(f"incompatible shapes {Qblk.shape} and {center.shape}")
    dots = seq_dot(Qblk, center[None, :])
    if metric == "dot":
        return -dots
    if metric != "cosine":
        raise ConfigError(f"unknown metric {metric!r}")
    cos, _ = _cosine(dots, seq_dot(Qblk, Qblk), seq_dot(center, center))
    return 1.0 - cos


@dataclass(eq=False)
class QuerySelection:
    """Which queries survive pruning, and how to restore the pruned ones.

    ``retained`` and ``pruned`` are ascending global token ids; ``donor[j]`` is
    the retained token whose output ``pruned[j]`` copies.  ``to_sparse`` maps a
    global id to its row in the compacted query matrix, or ``SENTINEL``.
    ``block_queries[b]`` lists block b's retained ids in ascending order.
    """

    r: float
    L: int
    retained: np.ndarray
    pruned: np.ndarray
    donor: np.ndarray
    to_sparse: np.ndarray
    block_queries: np.ndarray
    unit_size: int
    keep_per_unit: int
    use_window: bool
    metric: str = "cosine"
    zero_norm_rows: int = 0

    @property
    def retention_ratio(self) -> float:
        return len(self.retained) / self.L

    @property
    def query_sparsity(self) -> float:
        return 1.0 - self.retention_ratio

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "L": self.L,
            "use_window": self.use_window,
            "metric": self.metric,
            "unit_size": self.unit_size,
            "keep_per_unit": self.keep_per_unit,
            "zero_norm_rows": self.zero_norm_rows,
            "retained": self.retained.tolist(),
            "donor": {str(p): int(dn) for p, dn in zip(self.pruned, self.donor)},
        }


def select_queries(Q, spec: BlockSpec, r: float, use_window: bool | None = None,
                   metric: str = "cosine") -> QuerySelection:
    """Rank and prune queries unit by unit.

    ``use_window=None`` uses windows whenever ``spec.window`` is set.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"retention ratio r must be in (0, 1], got {r}")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    Q = np.asarray(Q)
    if Q.ndim != 2 or Q.shape[0] != spec.L:
        raise InvalidShape(f"Q has shape {Q.shape}, expected ({spec.L}, d)")
    if use_window is None:
        use_window = spec.window is not None
    units, dims = unit_tokens(spec, use_window)
    n_units, size = units.shape
    keep = retained_count(r, size)
    c = center_offset(dims)

    Qu = Q[units].astype(np.float64)  # (U, S, d)
    dots = seq_dot(Qu, Qu[:, c:c + 1, :])
    norms_sq = seq_dot(Qu, Qu)
    zero_rows = int(np.count_nonzero(norms_sq == 0))
    if metric == "cosine":
        cos, _ = _cosine(dots, norms_sq, norms_sq[:, c:c + 1])
        score = 1.0 - cos
    else:
        score = -dots

    # primary key: descending score; secondary: ascending global id
    order = np.lexsort((units, -score), axis=-1)
    keep_pos = np.sort(order[:, :keep], axis=1)
    drop_pos = np.sort(order[:, keep:], axis=1)

    L = spec.L
    retained = np.sort(np.take_along_axis(units, keep_pos, axis=1).ravel())
    to_sparse = np.full(L, SENTINEL, dtype=np.int64)
    to_sparse[retained] = np.arange(len(retained), dtype=np.int64)

    if keep < size:
        # similarity of every pruned member to every retained member of its unit
        kept = np.take_along_axis(Qu, keep_pos[:, :, None], axis=1)
        dropped = np.take_along_axis(Qu, drop_pos[:, :, None], axis=1)
        pair_dots = seq_dot(dropped[:, :, None, :], kept[:, None, :, :])
        if metric == "cosine":
            n_keep = np.take_along_axis(norms_sq, keep_pos, axis=1)
            n_drop = np.take_along_axis(norms_sq, drop_pos, axis=1)
            sim, _ = _cosine(pair_dots, n_drop[:, :, None], n_keep[:, None, :])
        else:
            sim = pair_dots
        # keep_pos is ascending, so argmax's first-hit rule picks the lowest id
        best = np.argmax(sim, axis=2)
        donor_pos = np.take_along_axis(keep_pos, best, axis=1)
        pruned_ids = np.take_along_axis(units, drop_pos, axis=1).ravel()
        donor_ids = np.take_along_axis(units, donor_pos, axis=1).ravel()
        order_p = np.argsort(pruned_ids, kind="stable")
        pruned, donor = pruned_ids[order_p], donor_ids[order_p]
    else:
        pruned = np.empty(0, dtype=np.int64)
        donor = np.empty(0, dtype=np.int64)

    block_of = spec.token_block[retained]
    counts = np.bincount(block_of, minlength=spec.N)
    per_block = int(counts[0])
    if np.any(counts != per_block):
        raise AssertionError("retained counts differ between blocks")
    # retained is ascending, so a stable sort by block keeps ids ascending per block
    block_queries = retained[np.argsort(block_of, kind="stable")].reshape(spec.N, per_block)

    return QuerySelection(
        r=float(r), L=L, retained=retained, pruned=pruned, donor=donor,
        to_sparse=to_sparse, block_queries=block_queries, unit_size=size,
        keep_per_unit=keep, use_window=bool(use_window), metric=metric,
        zero_norm_rows=zero_rows,
    )


def restore_outputs(O_s, sel: QuerySelection) -> np.ndarray:
    """Scatter compacted outputs back to length L, copying donors into pruned rows."""
    O_s = np.asarray(O_s)
    if O_s.ndim != 2 or O_s.shape[0] != len(sel.retained):
        raise InvalidShape(f"expected {len(sel.retained)} output rows, got {O_s.shape}")
    out = np.empty((sel.L, O_s.shape[1]), dtype=O_s.dtype)
    out[sel.retained] = O_s
    if len(sel.pruned):
        out[sel.pruned] = O_s[sel.to_sparse[sel.donor]]
    return out
