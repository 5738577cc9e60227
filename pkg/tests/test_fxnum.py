import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fxsolve.errors import AllZeroInput, ConfigInvalid, DegenerateDistribution, ZeroNorm
from fxsolve.fxnum import (Distribution, Fixed, FixedArray, MaxAbs, Schedule, align,
                           distribution_exponent, fixed_decrement, int_max_exponent,
                           max_exponent, parse_policy, quantize, requantize, zeta_of)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
vectors = arrays(float, st.integers(1, 40), elements=finite)


def test_quantize_truncates_toward_zero():
    q = quantize([0.6], 8)
    assert q.expo == 0
    assert q.mant.tolist() == [76]
    assert q.dequantize()[0] == 0.59375
    assert quantize([-0.6], 8).mant.tolist() == [-76]


def test_saturation_at_fixed_exponent():
    q = quantize([1.0, -1.0, 0.5], 4, Fixed(0))
    assert q.mant.tolist() == [7, -7, 4]
    assert q.n_saturated == 2


def test_max_exponent_exact_at_powers_of_two():
    assert max_exponent([0.5]) == -1
    assert max_exponent([0.51]) == 0
    assert max_exponent([4.0, -1.0]) == 2
    assert max_exponent([-4.0001]) == 3
    with pytest.raises(AllZeroInput):
        max_exponent([0.0, 0.0])


def test_int_max_exponent_matches_float_version():
    for m in (1, 2, 3, 4, 5, 127, 128, 129):
        assert int_max_exponent(np.array([m, -1]), -3) == max_exponent([m * 2.0 ** -3])


def test_distribution_exponent():
    x = np.array([1.0, -1.0, 1.0, -1.0])  # mean 0, std 1
    assert distribution_exponent(x) == 2
    with pytest.raises(DegenerateDistribution):
        distribution_exponent(np.zeros(3))


def test_all_zero_input_gets_exponent_zero():
    q = quantize(np.zeros(4), 8)
    assert q.expo == 0 and not q.mant.any()


@given(vectors, st.integers(2, 24))
def test_quantize_error_within_one_lsb(x, bits):
    if not np.any(x):
        return
    q = quantize(x, bits)
    # only an exact power-of-two maximum can clip, and then by one LSB
    assert q.n_saturated <= np.count_nonzero(np.abs(x) == 2.0 ** q.expo)
    err = np.abs(x - q.dequantize())
    assert np.all(err <= 2.0 ** q.lsb_exp)
    # truncation never grows the magnitude
    assert np.all(np.abs(q.dequantize()) <= np.abs(x))


@given(vectors, st.integers(2, 16))
def test_zeta_vector_bound(x, bits):
    if np.linalg.norm(x) == 0:
        return
    q = quantize(x, bits)
    assert zeta_of(x, q) <= 2.0 ** (2 - bits) * math.sqrt(x.size)


@given(vectors, st.integers(2, 20), st.integers(-5, 5))
def test_quantize_is_idempotent(x, bits, expo):
    q = quantize(x, bits, Fixed(expo))
    again = quantize(q.dequantize(), bits, Fixed(expo))
    assert again == q


@given(arrays(np.int64, st.integers(1, 30), elements=st.integers(-2**40, 2**40)),
       st.integers(2, 16), st.integers(-50, 10), st.integers(-20, 40))
def test_requantize_matches_quantize_of_exact_value(acc, bits, lsb, expo):
    exact = np.ldexp(acc.astype(float), lsb)
    got = requantize(acc, lsb, bits, expo, "trunc")
    assert got == quantize(exact, bits, Fixed(expo))


@given(arrays(np.int64, st.integers(1, 30), elements=st.integers(-2**40, 2**40)),
       st.integers(2, 16), st.integers(0, 30))
def test_floor_rounding_is_arithmetic_shift(acc, bits, shift):
    got = requantize(acc, 0, bits, shift + bits - 1, "floor")
    limit = 2 ** (bits - 1) - 1
    expected = np.clip(acc >> shift, -limit, limit)
    assert got.mant.tolist() == expected.tolist()


def test_requantize_wide_object_accumulator():
    acc = np.array([2 ** 80 + 5, -(2 ** 80)], dtype=object)
    got = requantize(acc, -70, 8, 11, "trunc")
    assert got == quantize([2.0 ** 10, -(2.0 ** 10)], 8, Fixed(11))
    with pytest.raises(ConfigInvalid):
        requantize(np.array([1]), 0, 8, 0, "nearest")


def test_align_is_exact():
    a = quantize([0.3, -0.7], 8, Fixed(0))
    b = quantize([5.0, 1.25], 6, Fixed(3))
    (ia, ib), lsb = align([a, b])
    assert np.allclose(np.ldexp(ia.astype(float), lsb), a.dequantize(), rtol=0, atol=0)
    assert np.allclose(np.ldexp(ib.astype(float), lsb), b.dequantize(), rtol=0, atol=0)


@given(arrays(np.int64, st.integers(0, 12), elements=st.integers(-127, 127)),
       st.integers(-20, 20))
def test_serialization_round_trips(mant, expo):
    q = FixedArray(mant, expo, 8)
    assert FixedArray.from_json(q.to_json()) == q
    assert FixedArray.from_csv_row(q.to_csv_row()) == q
    assert FixedArray.from_record(q.to_record()) == q


def test_fixed_array_validation():
    with pytest.raises(ValueError):
        FixedArray(np.array([128]), 0, 8)
    with pytest.raises(ConfigInvalid):
        FixedArray(np.array([0]), 0, 1)
    q = FixedArray(np.array([1, 2]), 0, 8)
    with pytest.raises(ValueError):
        q.mant[0] = 3


def test_zeta_zero_norm():
    with pytest.raises(ZeroNorm):
        zeta_of(np.zeros(3), quantize(np.zeros(3), 8))


def test_policies():
    assert MaxAbs().choose(0, None, np.array([3.0])) == 2
    d = Distribution(5)
    assert d.choose(1, 7, np.array([3.0])) == 7          # between refreshes
    assert d.choose(5, 7, np.array([1.0, -1.0])) == 2    # refresh step
    assert d.choose(3, None, np.array([1.0, -1.0])) == 2  # no current value yet
    assert Fixed(-3).choose(99, 0, None) == -3


def test_fixed_decrement_schedule():
    s = fixed_decrement(2, 80, -2)
    assert [s.value_at(k) for k in (0, 79, 80, 159, 160, 320, 10_000)] == [2, 2, 1, 1, 0, -2, -2]
    assert str(s) == "schedule:0=2,80=1,160=0,240=-1,320=-2"
    with pytest.raises(ConfigInvalid):
        Schedule(((5, 1), (5, 0)))


@pytest.mark.parametrize("text,expected", [
    ("maxabs", MaxAbs()),
    ("dist:5", Distribution(5)),
    ("dist", Distribution(1)),
    ("fixed:-2", Fixed(-2)),
    ("schedule:0=3,10=1", Schedule(((0, 3), (10, 1)))),
    ("decrement:1,4,0", Schedule(((0, 1), (4, 0)))),
])
def test_parse_policy(text, expected):
    assert parse_policy(text) == expected
    assert parse_policy(str(expected)) == expected


@pytest.mark.parametrize("text", ["bogus", "fixed:x", "dist:0", "decrement:1,2"])
def test_parse_policy_rejects(text):
    with pytest.raises(ConfigInvalid):
        parse_policy(text)
