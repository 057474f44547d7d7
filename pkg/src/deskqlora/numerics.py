"""Software bfloat16 codec, seeded RNG and small dense kernels.

Dense data is carried in numpy arrays (row-major, float64 when a kernel
needs wide accumulation). bf16 values are represented either by their raw
16-bit patterns (``uint16``) or as float32 values that are exactly
bf16-representable.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Rng",
    "bf16_encode",
    "bf16_decode",
    "bf16_round",
    "matmul",
    "sample_normal",
]

_F32_MAX = np.float32(np.finfo(np.float32).max)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def _round_to_odd_f32(x: np.ndarray) -> np.ndarray:
    """Narrow float64 to float32 with round-to-odd.

    Round-to-odd into a format with at least two extra bits avoids the
    double-rounding error of float64 -> float32 -> bf16.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        f = x.astype(np.float32)
        back = f.astype(np.float64)
        inexact = (back != x) & np.isfinite(x)
        # step f toward zero where RNE moved it away from zero
        away = inexact & (np.abs(back) > np.abs(x))
        f = np.where(away, np.nextafter(f, np.float32(0)), f)
        bits = f.view(np.uint32).copy()
    bits[inexact] |= np.uint32(1)
    return bits.view(np.float32)


def bf16_encode(x) -> np.ndarray:
    """Return the bf16 bit patterns (``uint16``) nearest to ``x``, ties to even.

    Finite values beyond the bf16 range round to infinity. NaN maps to a
    quiet NaN with the input's sign.
    """
    arr = np.asarray(x)
    if arr.dtype == np.float64 or arr.dtype.kind in "iu":
        f32 = _round_to_odd_f32(arr.astype(np.float64))
    else:
        f32 = arr.astype(np.float32)
    bits = np.ascontiguousarray(f32).view(np.uint32).astype(np.uint64)
    nan = np.isnan(f32)
    lsb = (bits >> np.uint64(16)) & np.uint64(1)
    rounded = ((bits + np.uint64(0x7FFF) + lsb) >> np.uint64(16)).astype(np.uint16)
    quiet = ((bits >> np.uint64(16)).astype(np.uint16) | np.uint16(0x0040))
    return np.where(nan, quiet, rounded).astype(np.uint16)


def bf16_decode(bits) -> np.ndarray:
    """Expand bf16 bit patterns to float32 (exact)."""
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return b.view(np.float32)


def bf16_round(x):
    """Round to the nearest bf16-representable value (ties to even).

    Scalars come back as Python floats, arrays as float32 arrays.
    """
    out = bf16_decode(bf16_encode(x))
    if np.ndim(x) == 0:
        return float(out.reshape(-1)[0])
    return out


def matmul(a, b, *, store_bf16: bool = False) -> np.ndarray:
    """Matrix product accumulated in float64.

    With ``store_bf16`` the result is re-rounded to bf16 storage after
    accumulation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = a @ b
    if store_bf16:
        return bf16_round(out).astype(np.float64)
    return out


class Rng:
    """Seeded random stream (PCG64). Single owner; not thread-safe."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child_seed(self) -> int:
        """Draw a 63-bit seed for a derived stream (e.g. a torch Generator)."""
        return int(self._gen.integers(0, 2**63 - 1))


def sample_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.full(n, float(mean))
    return rng.normal(n, mean, std)
