import numpy as np
import pytest
from hypothesis import given, strategies as st

from fxsolve.errors import AccumulatorOverflow, ConfigInvalid, ShapeMismatch
from fxsolve.fxnum import FixedArray, requantize
from fxsolve.systolic import (block_multiply, decompose, grid_to_matrix, mask_result,
                              reassemble, systolic_matvec)


def fixed(rng, shape, bits, expo=0):
    limit = 2 ** (bits - 1) - 1
    return FixedArray(rng.integers(-limit, limit + 1, size=shape), expo, bits)


def test_17x17_padding_and_cycles(rng):
    w = fixed(rng, (17, 17), 8)
    x = fixed(rng, (17, 1), 8)
    ops = decompose(w, x)
    assert ops.w_blocks.shape == (2, 2, 16, 16)
    assert ops.x_blocks.shape == (2, 1, 16, 2)
    grid = block_multiply(ops)
    assert grid.cycles == 2 * 2 * 1
    assert grid_to_matrix(grid).tolist() == (w.mant @ x.mant).tolist()
    wm, xm = reassemble(ops)
    assert np.array_equal(wm, w.mant) and np.array_equal(xm, x.mant)


@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 5), st.integers(2, 8),
       st.integers(0, 2**31))
def test_random_shapes_match_int64_oracle(m, n, b, bits, seed):
    rng = np.random.default_rng(seed)
    w = fixed(rng, (m, n), bits)
    x = fixed(rng, (n, b), bits)
    acc = grid_to_matrix(block_multiply(decompose(w, x)))
    assert acc.shape == (m, b)
    assert np.array_equal(acc.astype(np.int64), w.mant @ x.mant)


@given(st.integers(-6, 6), st.integers(-6, 6), st.integers(-10, 10),
       st.sampled_from(["trunc", "floor"]), st.integers(0, 2**31))
def test_mask_equals_direct_requantize(ew, ex, eo, rounding, seed):
    rng = np.random.default_rng(seed)
    w = fixed(rng, (20, 33), 8, ew)
    x = fixed(rng, (33,), 8, ex)
    out, stats = systolic_matvec(w, x, eo, rounding)
    direct = requantize(w.mant @ x.mant, w.lsb_exp + x.lsb_exp, 8, eo, rounding)
    assert out == direct
    assert stats["saturated"] == direct.n_saturated
    assert stats["block_issues"] == 2 * 3


def test_floor_mask_is_arithmetic_shift():
    out = mask_result(np.array([[-5], [5], [300]]), 0, 0, 0, bits=8, rounding="floor")
    # shift = 0 - 0 - 0 + 7 = 7
    assert out.mant[:, 0].tolist() == [-1, 0, 2]


def test_accumulator_overflow_is_reported():
    bits = 16
    limit = 2 ** (bits - 1) - 1
    w = FixedArray(np.full((1, 32), limit), 0, bits)
    x = FixedArray(np.full(32, limit), 0, bits)
    with pytest.raises(AccumulatorOverflow):
        block_multiply(decompose(w, x))


def test_operand_checks(rng):
    with pytest.raises(ConfigInvalid):
        decompose(fixed(rng, (2, 2), 8), fixed(rng, (2,), 6))
    with pytest.raises(ConfigInvalid):
        decompose(fixed(rng, (2, 2), 20), fixed(rng, (2,), 20))
    with pytest.raises(ShapeMismatch):
        decompose(fixed(rng, (2, 3), 8), fixed(rng, (2,), 8))
