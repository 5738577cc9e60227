import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fxsolve.errors import ShapeMismatch, SingularMatrix
from fxsolve.fxlinalg import (CirculantStencil, condition_number, eta_bound, eta_empirical,
                              fx_matvec, int_matvec, measure_error, quantize_operator,
                              rounded_eta_bound, spectral_norm)
from fxsolve.fxnum import Fixed, quantize


def test_eta_bound_value():
    assert eta_bound(0.01, 0.02) == pytest.approx(0.0306, abs=1e-15)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(2, 40), st.integers(0, 2**31))
def test_int_matvec_is_exact(m, n, bits, seed):
    rng = np.random.default_rng(seed)
    a = quantize(rng.normal(size=(m, n)), bits)
    x = quantize(rng.normal(size=n), bits)
    acc, lsb = int_matvec(a, x)
    exact = [sum(int(a.mant[i, j]) * int(x.mant[j]) for j in range(n)) for i in range(m)]
    assert [int(v) for v in acc] == exact
    assert lsb == a.lsb_exp + x.lsb_exp


def test_int_matvec_shape_checks():
    a = quantize(np.ones((3, 4)), 8)
    with pytest.raises(ShapeMismatch):
        int_matvec(a, quantize(np.ones(3), 8))
    with pytest.raises(ShapeMismatch):
        int_matvec(a, quantize(np.ones((4, 1)), 8))


def test_fx_matvec_rounds_once():
    a = quantize(np.array([[0.5, 0.25], [0.125, -0.5]]), 8, Fixed(0))
    x = quantize(np.array([0.75, -0.375]), 8, Fixed(0))
    y = fx_matvec(a, x, 8, 0)
    assert y == quantize(a.dequantize() @ x.dequantize(), 8, Fixed(0))


@given(st.integers(3, 9), st.integers(3, 9), st.integers(0, 2**31))
def test_stencil_matches_dense(h, w, seed):
    rng = np.random.default_rng(seed)
    st_ = rng.normal(size=(3, 3))
    op = CirculantStencil(st_, (h, w))
    dense = np.zeros((h * w, h * w))
    for i in range(h):
        for j in range(w):
            for p in range(3):
                for q in range(3):
                    dense[i * w + j, ((i - p + 1) % h) * w + (j - q + 1) % w] += st_[p, q]
    x = rng.normal(size=h * w)
    assert np.allclose(op.matvec(x), dense @ x)
    assert np.allclose(op.to_dense(), dense)


def test_stencil_wider_than_grid_wraps(rng):
    st_ = rng.normal(size=(7, 5))
    small = CirculantStencil(st_, (4, 3))
    big = CirculantStencil(st_, (12, 12))
    # fold the big dense operator's action onto the small grid by periodic summation
    x = rng.normal(size=(4, 3))
    tiled = np.tile(x, (3, 4))
    assert np.allclose(small.matvec(x.ravel()).reshape(4, 3),
                       big.matvec(tiled.ravel()).reshape(12, 12)[:4, :3])
    sq = quantize_operator(small, 8)
    xq = quantize(x.ravel(), 8)
    acc, lsb = int_matvec(sq, xq)
    assert np.allclose(np.ldexp(acc.astype(float), lsb),
                       sq.dequantize().matvec(xq.dequantize()))


def test_fixed_stencil_product_matches_dense_integer_product(rng):
    op = CirculantStencil(rng.normal(size=(5, 5)), (6, 7))
    sq = quantize_operator(op, 8)
    x = quantize(rng.normal(size=42), 8)
    acc, lsb = int_matvec(sq, x)
    dense_mant = np.rint(sq.dequantize().to_dense() * 2.0 ** -sq.lsb_exp).astype(np.int64)
    assert acc.tolist() == (dense_mant @ x.mant).tolist()


def test_spectral_norm_and_condition_number(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    ev = np.array([0.5, 1, 2, 3, 4, 10.0])
    g = q @ np.diag(ev) @ q.T
    assert spectral_norm(g) == pytest.approx(10.0, rel=1e-8)
    assert condition_number(g) == pytest.approx(20.0, rel=1e-8)
    with pytest.raises(SingularMatrix):
        condition_number(np.diag([1.0, 0.0]))


def test_circulant_norm_and_kappa():
    op = CirculantStencil(np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], float), (8, 8))
    ev = np.linalg.eigvalsh(op.to_dense())
    assert spectral_norm(op) == pytest.approx(ev.max())
    assert condition_number(op) == pytest.approx(ev.max() / ev.min())


@given(st.integers(1, 24), st.integers(4, 12), st.integers(0, 2**31))
def test_measured_error_within_model(n, bits, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n)) * 10.0 ** rng.uniform(-3, 3)
    x = rng.normal(size=n) * 10.0 ** rng.uniform(-3, 3)
    em = measure_error(m, x, bits)
    assert em.zeta_v <= 2.0 ** (2 - bits) * math.sqrt(n)
    assert em.zeta_m <= 2.0 ** (2 - bits) * n
    assert em.eta_product <= em.eta_upper * (1 + 1e-12)
    assert em.eta <= rounded_eta_bound(em.zeta_v, em.zeta_m, bits, n) * (1 + 1e-12)


def test_output_rounding_can_exceed_product_bound():
    # one element: three truncations compound past zeta_v + zeta_m + 3 zeta_v zeta_m
    em = measure_error(np.array([[0.5]]), np.array([0.63]), 4)
    assert em.eta_product <= em.eta_upper < em.eta


def test_eta_empirical_is_deterministic(rng):
    a = rng.normal(size=(5, 5))
    x_star = rng.uniform(-1, 1, 5)
    b = 0.1 * a.T @ a @ x_star
    e1 = eta_empirical(a, b, x_star, 8, n_samples=20, seed=3)
    e2, models = eta_empirical(a, b, x_star, 8, n_samples=20, seed=3, return_models=True)
    assert e1 == e2 and len(models) == 20
    assert 0 < e1 < 0.1
    with pytest.raises(ValueError):
        eta_empirical(a, b, x_star, 8, n_samples=0)
