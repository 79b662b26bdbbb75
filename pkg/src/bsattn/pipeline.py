"""End-to-end helpers: selections for a bundle, sparsity sweeps, output comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attn import full_attention, sparse_attention
from .blocks import BlockSpec, pool_blocks
from .errors import ConfigError, InvalidShape
from .kvsparse import DEFAULT_MODE, DEFAULT_TAU, Q2KMap, build_q2k, calibrate_k, pooled_scores, select_all_q2k
from .latents import LatentBundle
from .metrics import FlopReport, flop_report
from .qsparse import QuerySelection, select_queries
from .schedule import knobs_for_sparsity


@dataclass
class Selection:
    qsel: QuerySelection
    q2k: Q2KMap
    report: FlopReport


def block_scores(bundle: LatentBundle, spec: BlockSpec) -> np.ndarray:
    return pooled_scores(pool_blocks(bundle.Q, spec), pool_blocks(bundle.K, spec), bundle.d)


def select(bundle: LatentBundle, spec: BlockSpec, r: float = 0.5, *, k: float | None = None,
           kv_keep: float | None = None, mode: str = DEFAULT_MODE, tau: float = DEFAULT_TAU,
           use_window: bool | None = None, metric: str = "cosine") -> Selection:
    """Query and KV selections for ``bundle``.

    The KV side is driven either by an explicit ``k`` or by a target keep
    fraction ``kv_keep`` (k is then calibrated); ``kv_keep >= 1`` means dense.
    With neither given, k defaults to half the block count.
    """
    if spec.grid != bundle.grid:
        raise InvalidShape(f"block spec grid {spec.grid} != bundle grid {bundle.grid}")
    if k is not None and kv_keep is not None:
        raise ConfigError("give either k or kv_keep, not both")
    qsel = select_queries(bundle.Q, spec, r, use_window=use_window, metric=metric)
    if kv_keep is not None and kv_keep >= 1.0:
        q2k = select_all_q2k(spec.N, spec.N)
    elif kv_keep is not None:
        q2k = calibrate_k(block_scores(bundle, spec), kv_keep, mode, tau)
    else:
        k = max(1.0, 0.5 * spec.N) if k is None else k
        q2k = build_q2k(block_scores(bundle, spec), k, mode, tau)
    return Selection(qsel, q2k, flop_report(qsel, q2k, spec, bundle.d))


def compare_arrays(a: np.ndarray, b: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidShape(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    return {
        "max_abs": float(diff.max()) if diff.size else 0.0,
        "mean_abs": float(diff.mean()) if diff.size else 0.0,
        "rmse": float(math.sqrt(np.mean(diff ** 2))) if diff.size else 0.0,
    }


def sweep(bundle: LatentBundle, spec: BlockSpec, sparsities, *, r_fixed: float = 0.5,
          mode: str = DEFAULT_MODE, tau: float = DEFAULT_TAU, use_window: bool | None = None,
          with_rmse: bool = False, workers: int = 1) -> list[dict]:
    """One row per target sparsity (sorted ascending, duplicates dropped)."""
    targets = sorted({float(s) for s in sparsities})
    full = full_attention(bundle, workers=workers).O if with_rmse else None
    rows = []
    for s in targets:
        r, kv_keep = knobs_for_sparsity(s, r_fixed)
        sel = select(bundle, spec, r, kv_keep=kv_keep, mode=mode, tau=tau, use_window=use_window)
        row = {"target_sparsity": s}
        row.update(sel.report.csv_row())
        row.update(ref_ratio=1.0 / (1.0 - s), r=r, kv_keep_target=kv_keep, k=sel.q2k.k,
                   mode=sel.q2k.mode)
        if with_rmse:
            out = sparse_attention(bundle, spec, sel.qsel, sel.q2k, workers=workers).O
            row["rmse"] = compare_arrays(out, full)["rmse"]
        rows.append(row)
    return rows
