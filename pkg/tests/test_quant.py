import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskqlora.numerics import bf16_round
from deskqlora.quant import (
    BLOCK_SIZE,
    CorruptBlockError,
    Nf4Block,
    QuantizedTensor,
    dequantize_block,
    dequantize_tensor,
    max_half_gap,
    nf4_codebook,
    quantize_block,
    quantize_tensor,
    zero_index,
)


def inv_cdf_bisect(p: float) -> float:
    """Standard normal quantile by bisection on erf (independent of statistics.NormalDist)."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def oracle_codebook() -> np.ndarray:
    offset = 0.5 * ((1 - 1 / 30) + (1 - 1 / 32))
    neg = [-inv_cdf_bisect(offset + (0.5 - offset) * i / 8) for i in range(8)]
    pos = [inv_cdf_bisect(offset + (0.5 - offset) * i / 7) for i in range(7)]
    lv = np.array(sorted(neg + [0.0] + pos))
    return lv / np.abs(lv).max()


ORACLE = oracle_codebook()
ORACLE_HALF_GAP = float(np.diff(ORACLE).max() / 2)

# the widely used NF4 table has 8 positive levels; ours mirrors it (8 negative)
REFERENCE_TABLE = -np.array(
    [-1.0, -0.6961928, -0.5250731, -0.3949175, -0.2844414, -0.1847734, -0.0910500, 0.0,
     0.0795803, 0.1609302, 0.2461123, 0.3379152, 0.4407098, 0.5626170, 0.7229568, 1.0]
)[::-1]


def test_codebook_matches_bisection_oracle():
    assert np.max(np.abs(nf4_codebook() - ORACLE)) < 1e-6


def test_codebook_matches_reference_table():
    assert np.max(np.abs(nf4_codebook() - REFERENCE_TABLE)) < 1e-6


def test_codebook_shape():
    lv = nf4_codebook()
    assert lv.shape == (16,)
    assert lv[0] == -1.0 and lv[15] == 1.0
    assert np.all(np.diff(lv) > 0)
    assert (lv == 0.0).sum() == 1 and zero_index() == 8
    assert (lv < 0).sum() == 8 and (lv > 0).sum() == 7
    assert max_half_gap() == pytest.approx(ORACLE_HALF_GAP, abs=1e-9)


def test_zero_block():
    b = quantize_block(np.zeros(64))
    assert b.absmax == 0
    assert np.all(b.indices == zero_index())
    assert np.all(dequantize_block(b) == 0)


@pytest.mark.parametrize("k", [0, 17, 63])
def test_absmax_maps_to_top_level(k):
    v = np.random.default_rng(k).uniform(-0.5, 0.5, 64)
    v[k] = 0.9
    b = quantize_block(v)
    assert b.indices[k] == 15
    assert b.absmax == bf16_round(0.9)


def test_grid_points_are_fixed_points():
    idx = np.random.default_rng(0).integers(0, 16, 64)
    idx[0] = 15
    scale = bf16_round(2.5)
    v = nf4_codebook()[idx] * scale
    b = quantize_block(v)
    assert np.array_equal(b.indices, idx)
    assert np.array_equal(dequantize_block(b), v)


def test_ties_go_to_lower_index():
    lv = nf4_codebook()
    v = np.zeros(64)
    v[0] = 1.0
    v[1] = (lv[3] + lv[4]) / 2
    assert quantize_block(v).indices[1] == 3


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_error_bound_and_idempotence(v):
    b = quantize_block(v)
    d = dequantize_block(b)
    assert np.max(np.abs(d - v)) <= b.absmax * ORACLE_HALF_GAP + 1e-12 * max(1.0, b.absmax)
    again = dequantize_block(quantize_block(d))
    assert np.array_equal(again, d)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 64, elements=st.floats(-100, 100, allow_nan=False)),
    st.integers(-6, 6),
)
def test_scale_equivariance_power_of_two(v, e):
    c = 2.0**e
    a, b = quantize_block(v), quantize_block(c * v)
    assert np.array_equal(a.indices, b.indices)
    assert b.absmax == c * a.absmax


def test_random_block_error_bound():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(2000, 64))
    q = quantize_tensor(vals)
    err = np.abs(dequantize_tensor(q) - vals).max(axis=1)
    assert np.all(err <= q.absmax * ORACLE_HALF_GAP)


def test_block_counts_and_tail():
    assert quantize_tensor(np.ones((1, 64))).n_blocks == 1
    q = quantize_tensor(np.arange(65.0).reshape(1, 65))
    assert q.n_blocks == 2 and q.tail == 1
    back = dequantize_tensor(q)
    assert back.shape == (1, 65)


def test_storage_arithmetic():
    q = quantize_tensor(np.random.default_rng(0).normal(size=(64, 64)))
    assert q.n_blocks == 64
    assert q.index_bytes == 2048
    assert 4096 * 4 / q.index_bytes == 8
    assert q.nbytes == 2048 + 64 * 2


def test_nibble_order():
    idx = np.zeros(64, dtype=int)
    idx[0], idx[1] = 3, 12
    b = Nf4Block.from_indices(idx, 1.0)
    assert b.packed[0] == 3 | (12 << 4)


def test_shape_round_trip_and_determinism():
    t = np.random.default_rng(1).normal(size=(3, 5, 7))
    q1, q2 = quantize_tensor(t), quantize_tensor(t)
    assert q1.digest() == q2.digest()
    assert dequantize_tensor(q1).shape == (3, 5, 7)


def test_corrupt_inputs():
    with pytest.raises(CorruptBlockError):
        Nf4Block.from_indices(np.full(64, 16), 1.0)
    with pytest.raises(CorruptBlockError):
        Nf4Block(np.zeros(31, dtype=np.uint8), 1.0)
    with pytest.raises(CorruptBlockError):
        Nf4Block(np.zeros(32, dtype=np.uint8), -1.0)
    with pytest.raises(ValueError):
        quantize_block(np.zeros(BLOCK_SIZE + 1))


def test_tail_mismatch_rejected():
    q = quantize_tensor(np.ones(70))
    with pytest.raises(ValueError):
        QuantizedTensor(q.shape, q.packed, q.absmax, tail=5)
    with pytest.raises(ValueError):
        QuantizedTensor((200,), q.packed, q.absmax, tail=q.tail)
