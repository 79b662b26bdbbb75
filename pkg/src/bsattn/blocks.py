"""Token indexing and cuboid block / window geometry over a (T, H, W) grid."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, InvalidShape

Triple = tuple[int, int, int]
_AXES = ("t", "h", "w")


def flatten_index(t: int, h: int, w: int, H: int, W: int, T: int | None = None) -> int:
    """Row-major 1D index ``t*H*W + h*W + w``."""
    if t < 0 or (T is not None and t >= T) or not 0 <= h < H or not 0 <= w < W:
        raise IndexError(f"coordinate ({t},{h},{w}) outside grid ({T},{H},{W})")
    return t * H * W + h * W + w


def unflatten_index(n: int, H: int, W: int, T: int | None = None) -> Triple:
    if n < 0 or (T is not None and n >= T * H * W):
        raise IndexError(f"index {n} outside grid ({T},{H},{W})")
    t, rem = divmod(n, H * W)
    h, w = divmod(rem, W)
    return t, h, w


def _triple(value, name: str) -> Triple:
    out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise ConfigError(f"{name} must have three entries, got {value!r}")
    if min(out) < 1:
        raise ConfigError(f"{name} entries must be >= 1, got {out}")
    return out  # type: ignore[return-value]


def _local_offsets(outer: Triple, inner: Triple) -> np.ndarray:
    """Partition row-major offsets of an ``outer`` box into ``inner`` sub-boxes.

    Returns an array of shape (n_sub, prod(inner)); sub-boxes are enumerated
    row-major and offsets within each row are ascending.
    """
    (a, b, c), (x, y, z) = outer, inner
    ids = np.arange(a * b * c, dtype=np.int64).reshape(a // x, x, b // y, y, c // z, z)
    return ids.transpose(0, 2, 4, 1, 3, 5).reshape(-1, x * y * z)


@dataclass(frozen=True)
class BlockSpec:
    """Cuboid partition of a ``grid`` with optional window subdivision.

    Blocks are numbered row-major over ``(N_t, N_h, N_w)``.
    """

    grid: Triple
    cuboid: Triple = (4, 4, 4)
    window: Triple | None = None

    def __post_init__(self):
        grid = _triple(self.grid, "grid")
        cuboid = _triple(self.cuboid, "cuboid")
        for axis, g, c in zip(_AXES, grid, cuboid):
            if g % c:
                raise ConfigError(f"grid extent {g} on axis {axis} is not divisible by block size {c}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "cuboid", cuboid)
        if self.window is not None:
            window = _triple(self.window, "window")
            for axis, c, w in zip(_AXES, cuboid, window):
                if c % w:
                    raise ConfigError(f"block size {c} on axis {axis} is not divisible by window size {w}")
            object.__setattr__(self, "window", window)

    @property
    def L(self) -> int:
        T, H, W = self.grid
        return T * H * W

    @property
    def counts(self) -> Triple:
        return tuple(g // c for g, c in zip(self.grid, self.cuboid))  # type: ignore[return-value]

    @property
    def B(self) -> int:
        ct, ch, cw = self.cuboid
        return ct * ch * cw

    @property
    def N(self) -> int:
        nt, nh, nw = self.counts
        return nt * nh * nw

    def with_window(self, window: Triple | None) -> "BlockSpec":
        return BlockSpec(self.grid, self.cuboid, window)

    @cached_property
    def block_tokens(self) -> np.ndarray:
        """(N, B) array; row b holds block b's flattened token ids in ascending order."""
        return _local_offsets(self.grid, self.cuboid)

    @cached_property
    def token_block(self) -> np.ndarray:
        """Block id of every token, length L."""
        out = np.empty(self.L, dtype=np.int64)
        out[self.block_tokens] = np.arange(self.N, dtype=np.int64)[:, None]
        return out


def block_token_indices(spec: BlockSpec, b: int) -> np.ndarray:
    if not 0 <= b < spec.N:
        raise IndexError(f"block id {b} outside [0, {spec.N})")
    return spec.block_tokens[b].copy()


def pool_blocks(X: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Mean of each block's token rows, shape (N, d), float64.

    Tokens are accumulated one local offset at a time in ascending order so the
    result is bit-reproducible.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != spec.L:
        raise InvalidShape(f"expected ({spec.L}, d) rows, got {X.shape}")
    tokens = spec.block_tokens
    acc = np.zeros((spec.N, X.shape[1]), dtype=np.float64)
    for j in range(spec.B):
        acc += X[tokens[:, j]]
    return acc / spec.B


def window_token_offsets(spec: BlockSpec) -> np.ndarray:
    """Local offsets (within a cuboid) of each window, shape (n_windows, window_size)."""
    if spec.window is None:
        raise ConfigError("window size is not set on this BlockSpec")
    return _local_offsets(spec.cuboid, spec.window)


def unit_tokens(spec: BlockSpec, use_window: bool) -> tuple[np.ndarray, Triple]:
    """Global token ids of every selection unit and the unit's box dims.

    Units are blocks, or windows within blocks when ``use_window``; the result
    has shape (n_units, unit_size) ordered by block id then window id.
    """
    if not use_window:
        return spec.block_tokens, spec.cuboid
    offsets = window_token_offsets(spec)
    units = spec.block_tokens[:, offsets]  # (N, n_win, win_size)
    return units.reshape(-1, offsets.shape[1]), spec.window  # type: ignore[return-value]
