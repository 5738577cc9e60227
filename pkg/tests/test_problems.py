import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fxsolve.errors import DegenerateGeometry, OutOfRange, SingularKernel
from fxsolve.imageio import bundled_image
from fxsolve.problems import (ConvolutionOperator, convolution_spectrum, dct_inversion_problem,
                              dct_matrix, deconvolution_problem, gaussian_kernel, siddon_row,
                              tomography_matrix, tomography_problem)


# ---- dct ----------------------------------------------------------------

def test_dct_matrix_is_orthonormal_dct2():
    c = dct_matrix(4)
    assert np.allclose(c @ c.T, np.eye(4))
    k, n = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    ref = np.sqrt(2 / 4) * np.cos(np.pi * (2 * n + 1) * k / 8)
    ref[0] /= np.sqrt(2)
    assert np.allclose(c, ref)


@pytest.mark.parametrize("kappa", [1.0, 11.1, 25.0, 400.0])
def test_dct_kappa_exact(kappa):
    p = dct_inversion_problem(kappa)
    ev = np.linalg.eigvalsh(p.a.T @ p.a)
    assert ev.max() / ev.min() == pytest.approx(kappa, rel=1e-6)
    assert p.kappa == pytest.approx(kappa, rel=1e-6)
    assert np.all(np.abs(p.x_star) < 1)
    assert np.allclose(p.a @ p.x_star, p.y)


def test_dct_eigenvalues_linear():
    p = dct_inversion_problem(25.0)
    assert np.allclose(p.meta["eigenvalues"], [0.2, 0.2 + 0.8 / 3, 0.2 + 1.6 / 3, 1.0])
    with pytest.raises(ValueError):
        dct_inversion_problem(0.5)


# ---- deconvolution -------------------------------------------------------

@given(st.floats(0.0, 3.0))
def test_kernel_normalized(sigma):
    k = gaussian_kernel(sigma)
    assert np.sum(k.values ** 2) == pytest.approx(1.0, abs=1e-12)
    assert k.values[2, 2] == k.values.max()


def test_delta_kernel_spectrum():
    ev, kappa, op_norm = convolution_spectrum(gaussian_kernel(0.0), (8, 8))
    assert np.allclose(ev, 1.0) and kappa == pytest.approx(1.0) and op_norm == pytest.approx(1)


@pytest.mark.parametrize("sigma", [0.7, 0.85])
def test_spectrum_matches_dense_oracle(sigma):
    k = gaussian_kernel(sigma)
    op = ConvolutionOperator(k, (8, 8))
    a = op.to_dense()
    dense_ev = np.sort(np.linalg.eigvalsh(a.T @ a))
    ev, kappa, op_norm = convolution_spectrum(k, (8, 8))
    assert np.allclose(np.sort(ev.ravel()), dense_ev, rtol=1e-8)
    assert kappa == pytest.approx(dense_ev[-1] / dense_ev[0], rel=1e-8)
    # the operator's Gram stencil is the same A^T A
    assert np.allclose(op.gram().to_dense(), a.T @ a)
    assert np.allclose(op.rmatvec(np.arange(64.0)), a.T @ np.arange(64.0))


def test_spectrum_translation_invariant():
    k = gaussian_kernel(0.8).values
    shifted = np.zeros((7, 7))
    shifted[:5, 1:6] = k
    _, kappa, _ = convolution_spectrum(k, (16, 16))
    _, kappa_shift, _ = convolution_spectrum(shifted, (16, 16))
    assert kappa_shift == pytest.approx(kappa, rel=1e-10)


def test_kappa_increases_with_sigma():
    shape = (102, 128)
    kappas = [convolution_spectrum(gaussian_kernel(s), shape)[1]
              for s in (0.70, 0.75, 0.80, 0.85, 0.90)]
    assert all(b > a for a, b in zip(kappas, kappas[1:]))


def test_singular_kernel():
    with pytest.raises(SingularKernel):
        convolution_spectrum(np.ones((3, 3)), (6, 6))


def test_deconvolution_problem_measurement():
    img = bundled_image("sprite", 3)
    p = deconvolution_problem(img, 0.0)
    # delta kernel: y is the 8-bit quantized image
    assert np.max(np.abs(p.y - img.ravel())) <= 2.0 ** -7
    p = deconvolution_problem(img, 0.8)
    exact = p.a.matvec(p.x_star)
    assert np.linalg.norm(exact - p.y) <= 2.0 ** -6 * math.sqrt(exact.size) * np.abs(exact).max()
    with pytest.raises(OutOfRange):
        deconvolution_problem(np.ones((8, 8)), 0.7)


# ---- tomography ------------------------------------------------------------

def clip_length(t, ang, box):
    """Length of the line {p0 + s d} inside an axis-aligned box (Liang-Barsky)."""
    d = np.array([math.cos(ang), math.sin(ang)])
    p0 = t * np.array([-d[1], d[0]])
    lo, hi = -math.inf, math.inf
    for axis in range(2):
        a, b = box[axis]
        if abs(d[axis]) < 1e-15:
            if not a <= p0[axis] <= b:
                return 0.0
            continue
        s1, s2 = sorted(((a - p0[axis]) / d[axis], (b - p0[axis]) / d[axis]))
        lo, hi = max(lo, s1), min(hi, s2)
    return max(0.0, hi - lo)


@given(st.floats(-11.0, 11.0), st.floats(0.0, math.pi))
def test_siddon_matches_clipping_oracle(t, ang):
    row = siddon_row(t, ang, (16, 16))
    assert row.sum() == pytest.approx(clip_length(t, ang, [(-8, 8), (-8, 8)]), abs=1e-6)
    assert np.count_nonzero(row) <= 32
    assert np.all(row >= 0)
    d = (math.cos(ang), math.sin(ang))
    on_edge = any(abs(d[ax]) < 1e-15 and abs(t - round(t)) < 1e-9 for ax in (0, 1))
    if on_edge:
        return  # a beam along a pixel edge may be credited to either neighbour
    # per pixel: row 0 is the top
    for idx in np.flatnonzero(row)[:5]:
        r, c = divmod(idx, 16)
        box = [(c - 8, c - 7), (7 - r, 8 - r)]
        assert row[idx] == pytest.approx(clip_length(t, ang, box), abs=1e-6)


def test_horizontal_beam_through_one_row():
    row = siddon_row(7.5, 0.0, (16, 16)).reshape(16, 16)
    assert np.allclose(row[0], 1.0)
    assert not row[1:].any()


def test_tomography_geometry():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a = tomography_matrix()
    assert any(issubclass(w.category, DegenerateGeometry) for w in caught)
    assert a.shape[1] == 256 and a.shape[0] <= 60 * 31
    assert np.all(a.sum(axis=1) > 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGeometry)
        p = tomography_problem(bundled_image("sprite", 3))
    assert 101.80 / 2 <= p.kappa <= 2 * 101.80
    assert np.allclose(p.a @ p.x_star, p.y)


def test_problem_export(tmp_path):
    p = dct_inversion_problem(11.1)
    p.export(tmp_path / "dct")
    assert np.allclose(np.loadtxt(tmp_path / "dct" / "a.csv", delimiter=","), p.a, rtol=0)
    meta = (tmp_path / "dct" / "meta.txt").read_text()
    assert "kappa = " in meta and "family = dct" in meta
    d = deconvolution_problem(bundled_image("sprite", 3), 0.7)
    d.export(tmp_path / "deconv")
    assert (tmp_path / "deconv" / "kernel.csv").exists()
