"""Fixed-point matrix-vector products and their error model.

Products are computed as exact integer arithmetic on mantissas (int64 when the
worst-case sum fits, Python integers otherwise); the only rounding happens
when the result is requantized to the output format.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import AllZeroInput, NoConvergence, ShapeMismatch, SingularMatrix
from .fxnum import (FixedArray, MaxAbs, as_wide, fits_int64, int_max_exponent,
                    quantize, requantize, wide_to_float, zeta_of)


# --------------------------------------------------------------------------
# circulant operators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CirculantStencil:
    """Circular 2-D convolution on a ``grid`` by a small centered ``stencil``.

    Acts on flattened (row-major) grids, so it stands in for an
    ``N x N`` matrix with ``N = rows * cols``. A stencil wider than the grid
    wraps around it.
    """

    stencil: np.ndarray
    grid: tuple

    def __post_init__(self):
        st = np.asarray(self.stencil, dtype=float)
        if st.ndim != 2 or st.shape[0] % 2 == 0 or st.shape[1] % 2 == 0:
            raise ValueError("stencil must be 2-D with odd dimensions")
        object.__setattr__(self, "stencil", st)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    @property
    def shape(self):
        n = self.grid[0] * self.grid[1]
        return (n, n)

    def padded(self) -> np.ndarray:
        """Stencil embedded in the grid with its center at index (0, 0)."""
        kh, kw = self.stencil.shape
        rows = (np.arange(kh) - kh // 2) % self.grid[0]
        cols = (np.arange(kw) - kw // 2) % self.grid[1]
        pad = np.zeros(self.grid)
        np.add.at(pad, (rows[:, None], cols[None, :]), self.stencil)
        return pad

    def eigenvalues(self) -> np.ndarray:
        return np.fft.fft2(self.padded())

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.grid)
        y = np.fft.ifft2(np.fft.fft2(x) * self.eigenvalues())
        return y.real.ravel()

    def norm(self) -> float:
        return float(np.max(np.abs(self.eigenvalues())))

    def to_dense(self) -> np.ndarray:
        n = self.shape[0]
        eye = np.eye(n)
        return np.column_stack([self.matvec(eye[:, j]) for j in range(n)])

    def scaled(self, factor: float) -> "CirculantStencil":
        return CirculantStencil(self.stencil * factor, self.grid)


@dataclass(frozen=True)
class FixedStencil:
    """Quantized :class:`CirculantStencil` (the mantissas live in ``fixed``)."""

    fixed: FixedArray
    grid: tuple

    @property
    def shape(self):
        n = self.grid[0] * self.grid[1]
        return (n, n)

    @property
    def expo(self):
        return self.fixed.expo

    @property
    def bits(self):
        return self.fixed.bits

    @property
    def lsb_exp(self):
        return self.fixed.lsb_exp

    @property
    def n_saturated(self):
        return self.fixed.n_saturated

    def dequantize(self) -> CirculantStencil:
        return CirculantStencil(self.fixed.dequantize(), self.grid)


def quantize_operator(m, bits: int, policy=MaxAbs()):
    """Quantize a dense matrix or a :class:`CirculantStencil` to ``bits``."""
    if isinstance(m, CirculantStencil):
        return FixedStencil(quantize(m.stencil, bits, policy), m.grid)
    return quantize(np.asarray(m, dtype=float), bits, policy)


def operator_norm(m) -> float:
    """Spectral norm of a dense matrix or circulant operator."""
    if isinstance(m, CirculantStencil):
        return m.norm()
    return float(np.linalg.norm(np.asarray(m, dtype=float), 2))


def dense_of(m) -> np.ndarray:
    if isinstance(m, (CirculantStencil, FixedStencil)):
        return (m.dequantize() if isinstance(m, FixedStencil) else m).to_dense()
    if isinstance(m, FixedArray):
        return m.dequantize()
    return np.asarray(m, dtype=float)


def apply(m, x) -> np.ndarray:
    """Reference-precision product of a matrix-like operand with a vector."""
    if isinstance(m, CirculantStencil):
        return m.matvec(x)
    return np.asarray(m, dtype=float) @ np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# integer products
# --------------------------------------------------------------------------

def int_matvec(mq, xq: FixedArray):
    """Exact integer product of mantissas.

    Returns ``(acc, lsb_exp)`` where the product equals ``acc * 2**lsb_exp``;
    ``acc`` is int64 when the worst case fits and an object array otherwise.
    """
    if xq.mant.ndim != 1:
        raise ShapeMismatch("right operand must be a vector")
    lsb = mq.lsb_exp + xq.lsb_exp
    if isinstance(mq, FixedStencil):
        if xq.shape[0] != mq.shape[1]:
            raise ShapeMismatch(f"operator {mq.shape} vs vector {xq.shape}")
        taps = mq.fixed.mant.size
        if not fits_int64(mq.fixed.limit * xq.limit * taps):
            raise ShapeMismatch("stencil product does not fit 64-bit accumulation")
        acc = kernels.stencil_conv(xq.mant.reshape(mq.grid), mq.fixed.mant)
        return acc.ravel(), lsb
    if mq.mant.ndim != 2 or mq.shape[1] != xq.shape[0]:
        raise ShapeMismatch(f"matrix {mq.shape} vs vector {xq.shape}")
    if fits_int64(mq.limit * xq.limit * max(mq.shape[1], 1)):
        return mq.mant @ xq.mant, lsb
    m_obj = mq.mant.astype(object)
    x_obj = xq.mant.astype(object)
    return as_wide(m_obj.dot(x_obj)), lsb


def fx_matvec(mq, xq: FixedArray, out_bits: int, out_expo: int,
              rounding: str = "trunc") -> FixedArray:
    """Fixed-point product requantized to ``(out_bits, out_expo)``."""
    acc, lsb = int_matvec(mq, xq)
    return requantize(acc, lsb, out_bits, out_expo, rounding)


def product_exponent(acc, lsb_exp: int) -> int:
    """MaxAbs exponent of an exact integer product (0 for an all-zero product)."""
    try:
        return int_max_exponent(acc, lsb_exp)
    except AllZeroInput:
        return 0


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------

def spectral_norm(m, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration."""
    if isinstance(m, CirculantStencil):
        return m.norm()
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    if m.ndim != 2 or m.shape[1] != n:
        raise ShapeMismatch("spectral_norm needs a square matrix")
    # deterministic start, perturbed so it is not orthogonal to the top eigenvector
    v = np.ones(n) + 1e-3 * np.sin(np.arange(1, n + 1))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / nw
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    raise NoConvergence(f"power iteration did not converge in {max_iter} steps")


def condition_number(m) -> float:
    """``lambda_max / lambda_min`` of a symmetric positive definite matrix."""
    if isinstance(m, CirculantStencil):
        ev = np.abs(m.eigenvalues())
    else:
        ev = np.linalg.eigvalsh(np.asarray(m, dtype=float))
    lo, hi = float(np.min(ev)), float(np.max(ev))
    if lo <= 1e-12 * max(hi, 1.0):
        raise SingularMatrix(f"smallest eigenvalue {lo:g} is not positive")
    return hi / lo


# --------------------------------------------------------------------------
# error model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorModel:
    """Errors of one quantized product ``M x``, normalized by ``||M|| ||x||``.

    ``eta`` includes the final requantization to L bits; ``eta_product`` is
    the error of the exact product of the quantized operands, which is what
    ``eta_upper`` bounds.
    """

    zeta_v: float
    zeta_m: float
    eta: float
    eta_upper: float
    eta_product: float


def eta_bound(zeta_v: float, zeta_m: float) -> float:
    return zeta_v + zeta_m + 3.0 * zeta_v * zeta_m


def rounded_eta_bound(zeta_v: float, zeta_m: float, bits: int, n: int) -> float:
    """:func:`eta_bound` plus the output truncation at a MaxAbs exponent.

    Each output element loses less than ``2**(2-L)`` of the largest one, so
    the extra term is ``2**(2-L) sqrt(n) (1 + zeta_v)(1 + zeta_m)``.
    """
    return eta_bound(zeta_v, zeta_m) + 2.0 ** (2 - bits) * n ** 0.5 * (1 + zeta_v) * (1 + zeta_m)


def _zeta_operator(m, mq) -> float:
    if isinstance(m, CirculantStencil):
        diff = CirculantStencil(m.stencil - mq.fixed.dequantize(), m.grid)
        return diff.norm() / m.norm()
    return zeta_of(m, mq)


def measure_error(m, x, bits: int, out_expo: int | None = None,
                  rounding: str = "trunc") -> ErrorModel:
    """Quantize ``m`` and ``x`` with MaxAbs exponents and measure one product.

    ``out_expo`` defaults to the MaxAbs exponent of the exact integer product.
    """
    x = np.asarray(x, dtype=float)
    mq = quantize_operator(m, bits)
    xq = quantize(x, bits)
    acc, lsb = int_matvec(mq, xq)
    if out_expo is None:
        out_expo = product_exponent(acc, lsb)
    y = requantize(acc, lsb, bits, out_expo, rounding).dequantize()
    exact = apply(m, x)
    zv = zeta_of(x, xq)
    zm = _zeta_operator(m, mq)
    scale = operator_norm(m) * np.linalg.norm(x)
    eta = float(np.linalg.norm(y - exact) / scale)
    eta_p = float(np.linalg.norm(wide_to_float(acc, lsb) - exact) / scale)
    return ErrorModel(zv, zm, eta, eta_bound(zv, zm), eta_p)


def gram_of(a):
    """``A^T A`` for a dense matrix; operators provide their own ``gram()``."""
    if hasattr(a, "gram"):
        return a.gram()
    a = np.asarray(a, dtype=float)
    return a.T @ a


def eta_empirical(a, b, x_star, bits: int, n_samples: int = 200, seed: int = 0,
                  gram=None, return_models: bool = False):
    """Average normalized error of the fixed-point product ``A^T A x``.

    Samples ``x ~ Normal(b, ||b - x*||/2)`` elementwise, multiplies each with
    the quantized Gram matrix and averages ``||dy|| / (||A^T A|| ||x||)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    m = gram if gram is not None else gram_of(a)
    b = np.asarray(b, dtype=float).ravel()
    std = np.linalg.norm(b - np.asarray(x_star, dtype=float).ravel()) / 2.0
    rng = np.random.default_rng(seed)
    models = []
    for _ in range(n_samples):
        x = rng.normal(b, std)
        models.append(measure_error(m, x, bits))
    eta = float(np.mean([mdl.eta for mdl in models]))
    return (eta, models) if return_models else eta
