"""NF4 (4-bit NormalFloat) codebook and blockwise absmax quantization.

Packed layout: 64 values per block, two 4-bit codes per byte,
little-endian nibble order (low nibble holds the earlier element).
Each block carries one absmax scale stored at bf16 precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from .numerics import bf16_encode, bf16_decode

BLOCK_SIZE = 64
PACKED_BYTES = BLOCK_SIZE // 2

__all__ = [
    "BLOCK_SIZE",
    "CorruptBlockError",
    "Nf4Block",
    "QuantizedTensor",
    "nf4_codebook",
    "zero_index",
    "max_half_gap",
    "quantize_block",
    "dequantize_block",
    "quantize_tensor",
    "dequantize_tensor",
]


class CorruptBlockError(ValueError):
    """Packed block data cannot be decoded."""


def _quantile_offset() -> float:
    # midpoint of the 1 - 1/(2*15) and 1 - 1/(2*16) tail quantiles
    return 0.5 * ((1 - 1 / 30) + (1 - 1 / 32))


@lru_cache(maxsize=None)
def _codebook() -> tuple[float, ...]:
    inv = NormalDist().inv_cdf
    offset = _quantile_offset()
    # 8 evenly spaced probabilities per side, endpoint 0.5 (the zero level) dropped
    neg_p = np.linspace(offset, 0.5, 9)[:-1]
    pos_p = np.linspace(offset, 0.5, 8)[:-1]
    neg = [-inv(float(p)) for p in neg_p]
    pos = [inv(float(p)) for p in pos_p]
    levels = np.array(sorted(neg + [0.0] + pos), dtype=np.float64)
    levels /= np.abs(levels).max()
    return tuple(float(v) for v in levels)


def nf4_codebook() -> np.ndarray:
    """The 16 NF4 levels in ascending order: 8 negative, zero, 7 positive.

    Both endpoints are the same tail quantile, so normalizing by the
    largest magnitude pins them to exactly -1 and +1.
    """
    return np.array(_codebook())


def zero_index() -> int:
    return int(np.flatnonzero(nf4_codebook() == 0.0)[0])


def max_half_gap() -> float:
    return float(np.diff(nf4_codebook()).max() / 2)


@lru_cache(maxsize=None)
def _midpoints() -> np.ndarray:
    lv = nf4_codebook()
    return (lv[:-1] + lv[1:]) / 2


def _pack(indices: np.ndarray) -> np.ndarray:
    idx = indices.astype(np.uint8).reshape(-1, BLOCK_SIZE)
    return (idx[:, 0::2] | (idx[:, 1::2] << 4)).astype(np.uint8)


def _unpack(packed: np.ndarray) -> np.ndarray:
    packed = packed.reshape(-1, PACKED_BYTES)
    out = np.empty((packed.shape[0], BLOCK_SIZE), dtype=np.uint8)
    out[:, 0::2] = packed & 0x0F
    out[:, 1::2] = packed >> 4
    return out


@dataclass(frozen=True, eq=False)
class Nf4Block:
    """One quantized block: 32 packed bytes plus a bf16 absmax scale."""

    packed: np.ndarray
    absmax: float

    def __post_init__(self):
        p = np.asarray(self.packed)
        if p.dtype != np.uint8 or p.shape != (PACKED_BYTES,):
            raise CorruptBlockError(f"packed indices must be {PACKED_BYTES} uint8 bytes, got {p.dtype}{p.shape}")
        if not np.isfinite(self.absmax) or self.absmax < 0:
            raise CorruptBlockError(f"invalid absmax {self.absmax!r}")

    @classmethod
    def from_indices(cls, indices, absmax: float) -> "Nf4Block":
        idx = np.asarray(indices)
        if idx.shape != (BLOCK_SIZE,):
            raise CorruptBlockError(f"expected {BLOCK_SIZE} indices, got shape {idx.shape}")
        bad = idx[(idx < 0) | (idx > 15)]
        if bad.size:
            raise CorruptBlockError(f"index {int(bad[0])} outside [0, 15]")
        return cls(_pack(idx)[0], absmax)

    @property
    def indices(self) -> np.ndarray:
        return _unpack(self.packed)[0]

    def __eq__(self, other):
        if not isinstance(other, Nf4Block):
            return NotImplemented
        return np.array_equal(self.packed, other.packed) and self.absmax == other.absmax


def _quantize_rows(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a (n_blocks, 64) float array. Returns (indices, bf16 scales as float32)."""
    values = np.asarray(values, dtype=np.float64)
    absmax = np.abs(values).max(axis=1)
    scale = bf16_decode(bf16_encode(absmax))
    # a value can round below the true absmax; normalized entries then exceed 1 by < 2^-8
    safe = np.where(scale > 0, scale, 1.0).astype(np.float64)
    normed = values / safe[:, None]
    idx = np.searchsorted(_midpoints(), normed, side="left").astype(np.uint8)
    idx[scale == 0] = zero_index()
    return idx, scale


def quantize_block(values) -> Nf4Block:
    """Quantize up to 64 values; a short block is zero-padded.

    Each code is the level nearest to value/absmax, ties toward the lower
    index. Indices are computed against the stored (bf16) scale.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size > BLOCK_SIZE:
        raise ValueError(f"block holds at most {BLOCK_SIZE} values, got {v.size}")
    padded = np.zeros(BLOCK_SIZE)
    padded[: v.size] = v
    idx, scale = _quantize_rows(padded[None, :])
    return Nf4Block(_pack(idx)[0], float(scale[0]))


def dequantize_block(block: Nf4Block) -> np.ndarray:
    packed = np.asarray(block.packed)
    if packed.dtype != np.uint8 or packed.shape != (PACKED_BYTES,):
        raise CorruptBlockError("packed block has wrong size or dtype")
    return nf4_codebook()[_unpack(packed)[0]] * block.absmax


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """A tensor flattened row-major and stored as consecutive NF4 blocks."""

    shape: tuple[int, ...]
    packed: np.ndarray  # (n_blocks, 32) uint8
    absmax: np.ndarray  # (n_blocks,) float32, bf16-representable
    tail: int  # valid entries in the last block

    def __post_init__(self):
        numel = int(np.prod(self.shape)) if len(self.shape) else 1
        n_blocks = -(-numel // BLOCK_SIZE)
        expected_tail = numel - (n_blocks - 1) * BLOCK_SIZE if n_blocks else 0
        if self.packed.shape != (n_blocks, PACKED_BYTES) or self.absmax.shape != (n_blocks,):
            raise ValueError(
                f"block storage {self.packed.shape}/{self.absmax.shape} does not cover shape {self.shape}"
            )
        if self.tail != expected_tail:
            raise ValueError(f"tail length {self.tail} inconsistent with shape {self.shape} (expected {expected_tail})")

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return self.packed.shape[0]

    @property
    def blocks(self) -> list[Nf4Block]:
        return [Nf4Block(self.packed[i].copy(), float(self.absmax[i])) for i in range(self.n_blocks)]

    @property
    def index_bytes(self) -> int:
        return self.packed.nbytes

    @property
    def nbytes(self) -> int:
        # scales counted at their 2-byte bf16 storage width
        return self.packed.nbytes + 2 * self.n_blocks

    def to_bytes(self) -> bytes:
        return self.packed.tobytes() + bf16_encode(self.absmax).astype("<u2").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def quantize_tensor(t) -> QuantizedTensor:
    arr = np.asarray(t, dtype=np.float64)
    flat = arr.ravel()
    n_blocks = -(-flat.size // BLOCK_SIZE)
    padded = np.zeros(n_blocks * BLOCK_SIZE)
    padded[: flat.size] = flat
    idx, scale = _quantize_rows(padded.reshape(n_blocks, BLOCK_SIZE))
    tail = flat.size - (n_blocks - 1) * BLOCK_SIZE if n_blocks else 0
    return QuantizedTensor(tuple(arr.shape), _pack(idx).reshape(n_blocks, PACKED_BYTES), scale.astype(np.float32), tail)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    idx = _unpack(q.packed)
    vals = nf4_codebook()[idx] * q.absmax.astype(np.float64)[:, None]
    return vals.ravel()[: q.numel].reshape(q.shape)
