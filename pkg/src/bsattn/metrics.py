"""Analytic FLOP accounting for dense vs. bidirectional sparse attention.

Convention: 2 FLOPs per multiply-add, two matmuls (QK^T and PV), softmax
excluded.  Dense attention therefore costs ``4 L^2 d``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import BlockSpec
from .errors import ConfigError, SelectionMismatch
from .kvsparse import Q2KMap
from .qsparse import QuerySelection

CSV_COLUMNS = ("L", "d", "s_q", "s_kv", "pair_sparsity", "flops_full", "flops_sparse",
               "overhead_fraction", "flop_ratio")

# Selection-overhead model, reported alongside every FlopReport.
OVERHEAD_CONSTANTS = {
    "query_similarity_per_token": "2*d + 5",
    "query_sort_per_token": "1 * log2(L)",
    "kv_score_per_block_pair": "2*d",
    "kv_sort_per_block_pair": "log2(N)",
    "pooling_per_token": "2*d (Q and K representatives)",
    "overhead_fraction": "(query + kv + pooling overhead) / flops_full",
}


def flops_full(L: int, d: int) -> int:
    return 4 * int(L) ** 2 * int(d)


def computed_pairs(qsel: QuerySelection, q2k: Q2KMap, spec: BlockSpec) -> int:
    """Number of (query, key) token pairs the sparse executor evaluates."""
    rows = qsel.block_queries.shape[1]
    if q2k.n_query_blocks != qsel.block_queries.shape[0]:
        raise SelectionMismatch("query selection and q2k map disagree on the block count")
    return int(rows * int(np.sum(q2k.q2k_num)) * spec.B)


def flops_sparse(qsel: QuerySelection, q2k: Q2KMap, spec: BlockSpec, d: int) -> int:
    return 4 * computed_pairs(qsel, q2k, spec) * int(d)


def pair_sparsity(qsel: QuerySelection, q2k: Q2KMap, spec: BlockSpec) -> float:
    return 1.0 - computed_pairs(qsel, q2k, spec) / spec.L ** 2


def overhead_flops(L: int, N: int, d: int) -> tuple[float, float]:
    """(query-side, KV-side) selection overhead.

    Query side: center similarity per token plus an ``L log2 L`` sort.
    KV side: each of the N query-block rows scores and sorts N KV blocks.
    """
    query = L * (2 * d + 5) + L * math.log2(L) if L > 1 else L * (2 * d + 5)
    per_row = N * (2 * d) + (N * math.log2(N) if N > 1 else 0.0)
    return float(query), float(N * per_row)


def pooling_flops(L: int, d: int) -> float:
    return float(2 * L * d)


def combined_sparsity(s_q: float, s_kv: float) -> float:
    for name, s in (("s_q", s_q), ("s_kv", s_kv)):
        if not 0.0 <= s < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {s}")
    return 1.0 - (1.0 - s_q) * (1.0 - s_kv)


@dataclass
class FlopReport:
    L: int
    d: int
    N: int
    B: int
    s_q: float
    s_kv: float
    pair_sparsity: float
    flops_full: float
    flops_sparse_attn: float
    flops_overhead_query: float
    flops_overhead_kv: float
    flops_overhead_pool: float
    constants: dict = field(default_factory=lambda: dict(OVERHEAD_CONSTANTS))

    @property
    def flops_overhead(self) -> float:
        return self.flops_overhead_query + self.flops_overhead_kv + self.flops_overhead_pool

    @property
    def overhead_fraction(self) -> float:
        return self.flops_overhead / self.flops_full

    @property
    def overhead_fraction_of_sparse(self) -> float:
        """Overhead as a share of the FLOPs the sparse path actually executes."""
        return self.flops_overhead / (self.flops_sparse_attn + self.flops_overhead)

    @property
    def flop_ratio(self) -> float:
        return self.flops_full / (self.flops_sparse_attn + self.flops_overhead)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(
            flops_overhead=self.flops_overhead,
            overhead_fraction=self.overhead_fraction,
            overhead_fraction_of_sparse=self.overhead_fraction_of_sparse,
            flop_ratio=self.flop_ratio,
        )
        return out

    def csv_row(self) -> dict:
        return {
            "L": self.L, "d": self.d, "s_q": self.s_q, "s_kv": self.s_kv,
            "pair_sparsity": self.pair_sparsity, "flops_full": self.flops_full,
            "flops_sparse": self.flops_sparse_attn, "overhead_fraction": self.overhead_fraction,
            "flop_ratio": self.flop_ratio,
        }


def flop_report(qsel: QuerySelection, q2k: Q2KMap, spec: BlockSpec, d: int) -> FlopReport:
    """Report for concrete selections.

    A side that was not sparsified (``r == 1``, or a select-all KV map) did no
    ranking work and is charged no overhead.
    """
    q_over, kv_over = overhead_flops(spec.L, spec.N, d)
    pool = pooling_flops(spec.L, d)
    if qsel.r >= 1.0:
        q_over = 0.0
    if q2k.mode == "select_all":
        kv_over = pool = 0.0
    return FlopReport(
        L=spec.L, d=int(d), N=spec.N, B=spec.B,
        s_q=qsel.query_sparsity, s_kv=1.0 - q2k.keep_fraction,
        pair_sparsity=pair_sparsity(qsel, q2k, spec),
        flops_full=float(flops_full(spec.L, d)),
        flops_sparse_attn=float(flops_sparse(qsel, q2k, spec, d)),
        flops_overhead_query=q_over, flops_overhead_kv=kv_over, flops_overhead_pool=pool,
    )


def analytic_report(spec: BlockSpec, d: int, s_q: float, s_kv: float) -> FlopReport:
    """Report for uniform selections described only by their sparsities."""
    s = combined_sparsity(s_q, s_kv)
    full = float(flops_full(spec.L, d))
    q_over, kv_over = overhead_flops(spec.L, spec.N, d)
    return FlopReport(
        L=spec.L, d=int(d), N=spec.N, B=spec.B, s_q=s_q, s_kv=s_kv, pair_sparsity=s,
        flops_full=full, flops_sparse_attn=full * (1.0 - s_q) * (1.0 - s_kv),
        flops_overhead_query=q_over, flops_overhead_kv=kv_over,
        flops_overhead_pool=pooling_flops(spec.L, d),
    )
