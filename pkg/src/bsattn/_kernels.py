"""Reductions with a fixed, shape-independent summation order.

numpy/BLAS reductions may change association with array shape, layout or
thread count.  These helpers accumulate strictly left to right so that a value
depends only on its own operands, which is what lets the sparse executor
reproduce dense attention bit for bit when nothing is pruned.
"""
import numpy as np


def seq_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum(a * b, axis=-1)`` accumulated in ascending channel order (float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    acc = a[..., 0] * b[..., 0]
    for c in range(1, a.shape[-1]):
        acc = acc + a[..., c] * b[..., c]
    return acc


def seq_sum(x: np.ndarray) -> np.ndarray:
    """Left-to-right sum over the last axis."""
    return np.cumsum(x, axis=-1)[..., -1]


def scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """(R, d) x (M, d) -> (R, M) dot products, channel order fixed."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    acc = q[:, 0, None] * k[None, :, 0]
    for c in range(1, q.shape[1]):
        acc += q[:, c, None] * k[None, :, c]
    return acc


def weighted_rows(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(R, M) x (M, d) -> (R, d), each output summed over keys in ascending order."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty((p.shape[0], v.shape[1]), dtype=np.float64)
    for c in range(v.shape[1]):
        out[:, c] = seq_sum(p * v[None, :, c])
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; sums use the fixed order above."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / seq_sum(e)[..., None]
