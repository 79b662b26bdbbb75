"""Deterministic synthetic Q/K/V latents and the ``.bsal`` container.

Every value is drawn from a single splitmix64 stream so a bundle is a pure
function of ``(seed, T, H, W, d, dist)``.  Q is filled first, then K, then V,
each in token-major / channel-minor order.

File layout (little endian)::

    b"BSAL" | u8 version=1 | u32 T | u32 H | u32 W | u32 d | f32[L*d] Q | f32[L*d] K | f32[L*d] V
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes
from .errors import FormatError, InvalidShape

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

BSAL_MAGIC = b"BSAL"
BSAL_VERSION = 1
_HEADER = struct.Struct("<4sBIIII")
_U32_MAX = (1 << 32) - 1

DISTRIBUTIONS = ("uniform", "gaussian")


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(value, new_state)``."""
    state = (int(state) + GOLDEN_GAMMA) & MASK64
    return _mix(state), state


def splitmix_stream(seed: int, count: int) -> np.ndarray:
    """The first ``count`` outputs of splitmix64 seeded with ``seed``, as uint64.

    Equivalent to calling :func:`splitmix_next` ``count`` times, but vectorized:
    the i-th state is ``seed + (i + 1) * gamma`` modulo 2**64.
    """
    if count < 0:
        raise InvalidShape(f"negative draw count {count}")
    with np.errstate(over="ignore"):
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(int(seed) & MASK64) + steps * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z


def bits_to_uniform(bits: np.ndarray) -> np.ndarray:
    """Map uint64 draws to float32 in [0, 1) using the top 24 bits (exact in binary32)."""
    top = (bits >> np.uint64(40)).astype(np.float32)
    return top * np.float32(2.0**-24)


@dataclass(eq=False)
class LatentBundle:
    """Q, K, V token matrices for a ``(T, H, W)`` latent grid with head dim ``d``."""

    T: int
    H: int
    W: int
    d: int
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in ("T", "H", "W", "d"):
            value = int(getattr(self, name))
            if value < 1:
                raise InvalidShape(f"{name} must be >= 1, got {value}")
            setattr(self, name, value)
        shape = (self.L, self.d)
        for name in ("Q", "K", "V"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise InvalidShape(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidShape(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def L(self) -> int:
        return self.T * self.H * self.W

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.T, self.H, self.W)

    def __eq__(self, other):
        if not isinstance(other, LatentBundle):
            return NotImplemented
        if (self.T, self.H, self.W, self.d) != (other.T, other.H, other.W, other.d):
            return False
        # bitwise comparison so that -0.0 != 0.0
        return all(
            np.array_equal(getattr(self, m).view(np.uint32), getattr(other, m).view(np.uint32))
            for m in ("Q", "K", "V")
        )

    def to_bytes(self) -> bytes:
        for name in ("T", "H", "W", "d"):
            if getattr(self, name) > _U32_MAX:
                raise InvalidShape(f"{name}={getattr(self, name)} does not fit in u32")
        header = _HEADER.pack(BSAL_MAGIC, BSAL_VERSION, self.T, self.H, self.W, self.d)
        le = np.dtype("<f4")
        return header + b"".join(getattr(self, m).astype(le, copy=False).tobytes() for m in ("Q", "K", "V"))


def gen_bundle(seed: int, T: int, H: int, W: int, d: int, dist: str = "uniform") -> LatentBundle:
    """Generate a bundle from a splitmix64 stream.

    ``uniform`` values are in [0, 1).  ``gaussian`` applies Box-Muller to
    consecutive uniform pairs ``(u1, u2)``, producing ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)`` with ``r = sqrt(-2 ln(1 - u1))``; the ``1 - u1`` keeps the
    log argument in (0, 1].
    """
    for name, value in (("T", T), ("H", H), ("W", W), ("d", d)):
        if int(value) < 1:
            raise InvalidShape(f"{name} must be >= 1, got {value}")
    if dist not in DISTRIBUTIONS:
        raise InvalidShape(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    L = T * H * W
    n = L * d
    total = 3 * n
    if dist == "uniform":
        values = bits_to_uniform(splitmix_stream(seed, total))
    else:
        pairs = (total + 1) // 2
        u = bits_to_uniform(splitmix_stream(seed, 2 * pairs)).astype(np.float64)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        values = z[:total].astype(np.float32)
    Q, K, V = (values[i * n:(i + 1) * n].reshape(L, d) for i in range(3))
    return LatentBundle(T, H, W, d, Q, K, V)


def bundle_from_bytes(data: bytes) -> LatentBundle:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(data)} bytes)")
    magic, version, T, H, W, d = _HEADER.unpack_from(data)
    if magic != BSAL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BSAL_MAGIC!r}")
    if version != BSAL_VERSION:
        raise FormatError(f"unsupported version {version}")
    if min(T, H, W, d) < 1:
        raise InvalidShape(f"zero extent in header (T,H,W,d)=({T},{H},{W},{d})")
    n = T * H * W * d
    expected = _HEADER.size + 3 * n * 4
    if expected > 1 << 62:
        raise InvalidShape(f"header shape ({T},{H},{W},{d}) overflows addressable size")
    if len(data) < expected:
        raise FormatError(f"truncated payload: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=3 * n).astype(np.float32)
    L = T * H * W
    Q, K, V = (flat[i * n:(i + 1) * n].reshape(L, d) for i in range(3))
    return LatentBundle(T, H, W, d, Q, K, V)


def write_bundle(path, bundle: LatentBundle) -> None:
    atomic_write_bytes(path, bundle.to_bytes())


def read_bundle(path) -> LatentBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


def bsal_file_size(T: int, H: int, W: int, d: int) -> int:
    return _HEADER.size + 3 * T * H * W * d * 4
