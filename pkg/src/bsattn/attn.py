"""Dense reference attention and the block-gathered bidirectional sparse executor.

Both paths share the same fixed-order kernels, so with nothing pruned the
sparse executor reproduces dense attention exactly.  No mask is applied: video
DiT attention is bidirectional.

``.bsao`` layout (little endian)::

    b"BSAO" | u8 version=1 | u32 L | u32 d | f32[L*d] O
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes
from ._kernels import scores as _dot_scores
from ._kernels import seq_sum, weighted_rows
from .blocks import BlockSpec
from .errors import FormatError, InvalidShape, SelectionMismatch
from .kvsparse import Q2KMap
from .latents import LatentBundle
from .qsparse import QuerySelection, restore_outputs

BSAO_MAGIC = b"BSAO"
BSAO_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_CHUNK = 128


@dataclass(eq=False)
class AttentionOutput:
    """Full-length output plus what the executor gathered.

    ``kv_tokens[i]`` is the number of KV tokens query block i attended (None for
    dense attention); ``row_max`` holds the softmax shift of every computed row,
    in the order of the computed queries.
    """

    O: np.ndarray
    row_max: np.ndarray
    kv_tokens: np.ndarray | None = None


def softmax_row(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] == 0:
        raise InvalidShape(f"softmax needs a non-empty 1-D row, got shape {x.shape}")
    e = np.exp(x - np.max(x))
    return e / seq_sum(e)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v for a group of query rows; float64 throughout."""
    s = _dot_scores(q, k) / math.sqrt(q.shape[1])
    shift = np.max(s, axis=1)
    e = np.exp(s - shift[:, None])
    p = e / seq_sum(e)[:, None]
    return weighted_rows(p, v), shift


def _run(tasks, fn, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def full_attention(bundle: LatentBundle, workers: int = 1) -> AttentionOutput:
    """Dense bidirectional attention over all L tokens."""
    Q, K, V = bundle.Q, bundle.K, bundle.V
    if not Q.shape == K.shape == V.shape:
        raise InvalidShape("Q, K, V shapes differ")
    K64, V64 = K.astype(np.float64), V.astype(np.float64)
    starts = range(0, bundle.L, _CHUNK)
    parts = _run(starts, lambda s: _attend(Q[s:s + _CHUNK].astype(np.float64), K64, V64), workers)
    O = np.concatenate([o for o, _ in parts]).astype(np.float32)
    row_max = np.concatenate([m for _, m in parts])
    return AttentionOutput(O=O, row_max=row_max)


def _check_consistent(bundle: LatentBundle, spec: BlockSpec, qsel: QuerySelection, q2k: Q2KMap):
    if spec.grid != bundle.grid:
        raise SelectionMismatch(f"block spec grid {spec.grid} != bundle grid {bundle.grid}")
    if qsel.L != bundle.L or qsel.block_queries.shape[0] != spec.N:
        raise SelectionMismatch("query selection was built for a different geometry")
    if q2k.n_query_blocks != spec.N or q2k.n != spec.N:
        raise SelectionMismatch(
            f"q2k map covers {q2k.n_query_blocks}x{q2k.n} blocks, geometry has {spec.N}")
    for i, row in enumerate(q2k.q2k_index):
        if len(row) != q2k.q2k_num[i] or len(row) == 0:
            raise SelectionMismatch(f"q2k row {i} is empty or disagrees with q2k_num")
        if row.min() < 0 or row.max() >= spec.N:
            raise SelectionMismatch(f"q2k row {i} references a block outside [0, {spec.N})")


def gathered_kv_tokens(spec: BlockSpec, blocks) -> np.ndarray:
    """Token ids of the given KV blocks, ascending."""
    return np.sort(spec.block_tokens[np.asarray(blocks, dtype=np.int64)].ravel())


def sparse_attention(bundle: LatentBundle, spec: BlockSpec, qsel: QuerySelection, q2k: Q2KMap,
                     workers: int = 1) -> AttentionOutput:
    """Attend each query block's retained queries to its selected KV blocks.

    Computed rows land at the retained positions; pruned positions are then
    filled from their donors so the output has all L rows.
    """
    _check_consistent(bundle, spec, qsel, q2k)
    Q, K, V = bundle.Q, bundle.K, bundle.V

    def one_block(i):
        rows = qsel.block_queries[i]
        kv = gathered_kv_tokens(spec, q2k.q2k_index[i])
        o, shift = _attend(Q[rows].astype(np.float64), K[kv].astype(np.float64),
                           V[kv].astype(np.float64))
        return o, shift, len(kv)

    parts = _run(range(spec.N), one_block, workers)
    O_s = np.empty((len(qsel.retained), bundle.d), dtype=np.float64)
    row_max = np.empty(len(qsel.retained), dtype=np.float64)
    for i, (o, shift, _) in enumerate(parts):
        pos = qsel.to_sparse[qsel.block_queries[i]]
        O_s[pos] = o
        row_max[pos] = shift
    O = restore_outputs(O_s.astype(np.float32), qsel)
    kv_tokens = np.array([n for _, _, n in parts], dtype=np.int64)
    return AttentionOutput(O=O, row_max=row_max, kv_tokens=kv_tokens)


def output_to_bytes(O: np.ndarray) -> bytes:
    O = np.asarray(O, dtype=np.float32)
    if O.ndim != 2:
        raise InvalidShape(f"output must be 2-D, got shape {O.shape}")
    L, d = O.shape
    return _HEADER.pack(BSAO_MAGIC, BSAO_VERSION, L, d) + O.astype("<f4").tobytes()


def output_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(data)} bytes)")
    magic, version, L, d = _HEADER.unpack_from(data)
    if magic != BSAO_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BSAO_MAGIC!r}")
    if version != BSAO_VERSION:
        raise FormatError(f"unsupported version {version}")
    if L < 1 or d < 1:
        raise InvalidShape(f"zero extent in header (L,d)=({L},{d})")
    expected = _HEADER.size + L * d * 4
    if len(data) != expected:
        raise FormatError(f"payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32).reshape(L, d)


def write_output(path, O: np.ndarray) -> None:
    atomic_write_bytes(path, output_to_bytes(O))


def read_output(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return output_from_bytes(fh.read())
