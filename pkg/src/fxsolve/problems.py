"""Test problems: DCT-based matrix inversion, Gaussian deconvolution, parallel-beam tomography."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
from scipy.signal import convolve2d

from .errors import DegenerateGeometry, OutOfRange, SingularKernel
from .fxlinalg import CirculantStencil, condition_number, gram_of, spectral_norm
from .fxnum import MaxAbs, quantize


@dataclass
class ProblemSpec:
    a: object                 # dense matrix or ConvolutionOperator
    y: np.ndarray
    x_star: np.ndarray
    op_norm: float
    kappa: float
    meta: dict = field(default_factory=dict)

    @property
    def gram(self):
        return gram_of(self.a)

    def export(self, directory):
        """Write ``a.csv`` (or ``kernel.csv``), ``y.csv``, ``x_star.csv`` and ``meta.txt``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(self.a, ConvolutionOperator):
            np.savetxt(out / "kernel.csv", self.a.kernel, delimiter=",", fmt="%.17g")
            meta = dict(self.meta, grid=f"{self.a.grid[0]}x{self.a.grid[1]}")
        else:
            np.savetxt(out / "a.csv", np.asarray(self.a), delimiter=",", fmt="%.17g")
            meta = dict(self.meta)
        np.savetxt(out / "y.csv", self.y, delimiter=",", fmt="%.17g")
        np.savetxt(out / "x_star.csv", self.x_star, delimiter=",", fmt="%.17g")
        meta.update(op_norm=repr(float(self.op_norm)), kappa=repr(float(self.kappa)))
        (out / "meta.txt").write_text("".join(f"{k} = {meta[k]}\n" for k in sorted(meta)))


# --------------------------------------------------------------------------
# matrix inversion
# --------------------------------------------------------------------------

def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``k`` is the ``k``-th basis vector."""
    return scipy.fft.dct(np.eye(n), norm="ortho", axis=0)


def dct_inversion_problem(kappa_target: float, n: int = 4, seed: int = 0) -> ProblemSpec:
    """``A = C diag(lam) C^T`` with ``lam`` linear on ``[1/sqrt(kappa), 1]``.

    ``kappa(A^T A)`` equals ``kappa_target`` by construction; ``x_star`` is
    uniform in (-1, 1) and ``y = A x_star``.
    """
    if kappa_target < 1:
        raise ValueError("kappa_target must be >= 1")
    c = dct_matrix(n)
    lam = np.linspace(1.0 / math.sqrt(kappa_target), 1.0, n)
    a = c @ np.diag(lam) @ c.T
    rng = np.random.default_rng(seed)
    x_star = rng.uniform(-1.0, 1.0, n)
    g = a.T @ a
    return ProblemSpec(a, a @ x_star, x_star, spectral_norm(g), condition_number(g),
                       {"family": "dct", "kappa_target": kappa_target, "eigenvalues": lam.tolist(),
                        "seed": seed})


# --------------------------------------------------------------------------
# deconvolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    support: tuple
    k0: float
    values: np.ndarray


def gaussian_kernel(sigma: float, support=(5, 5)) -> GaussianKernel:
    """Centered Gaussian ``K0 exp(-(dp^2 + dq^2) / sigma^2)`` with ``sum K^2 = 1``.

    ``sigma = 0`` gives the delta kernel.
    """
    rows, cols = support
    if rows % 2 == 0 or cols % 2 == 0:
        raise ValueError("kernel support must be odd in both dimensions")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    dp = np.arange(rows) - (rows - 1) / 2
    dq = np.arange(cols) - (cols - 1) / 2
    d2 = dp[:, None] ** 2 + dq[None, :] ** 2
    if sigma ** 2 == 0:  # includes sigmas so small their square underflows
        raw = (d2 == 0).astype(float)
    else:
        with np.errstate(over="ignore"):
            raw = np.exp(-d2 / sigma ** 2)
    k0 = 1.0 / math.sqrt(float(np.sum(raw ** 2)))
    return GaussianKernel(float(sigma), (rows, cols), k0, k0 * raw)


class ConvolutionOperator:
    """Circular convolution with a small kernel on a 2-D grid (flattened row-major)."""

    def __init__(self, kernel, grid):
        self.kernel = np.asarray(kernel.values if isinstance(kernel, GaussianKernel) else kernel,
                                 dtype=float)
        self.grid = tuple(int(g) for g in grid)
        self._forward = CirculantStencil(self.kernel, self.grid)
        self._adjoint = CirculantStencil(self.kernel[::-1, ::-1], self.grid)

    @property
    def shape(self):
        n = self.grid[0] * self.grid[1]
        return (n, n)

    def matvec(self, x):
        return self._forward.matvec(x)

    def rmatvec(self, y):
        return self._adjoint.matvec(y)

    def gram(self) -> CirculantStencil:
        return CirculantStencil(convolve2d(self.kernel, self.kernel[::-1, ::-1]), self.grid)

    def to_dense(self) -> np.ndarray:
        return self._forward.to_dense()


def convolution_spectrum(kernel, image_shape):
    """Eigenvalues ``|K^|^2`` of ``A^T A`` for circular convolution at ``image_shape``.

    Returns ``(eigenvalues, kappa, op_norm)``.
    """
    values = kernel.values if isinstance(kernel, GaussianKernel) else np.asarray(kernel)
    ev = np.abs(CirculantStencil(values, image_shape).eigenvalues()) ** 2
    lo, hi = float(ev.min()), float(ev.max())
    if lo < 1e-15:
        raise SingularKernel(f"smallest eigenvalue {lo:g} makes deconvolution ill-posed")
    return ev, hi / lo, hi


def deconvolution_problem(image, sigma: float, measurement_bits: int = 8,
                          support=(5, 5)) -> ProblemSpec:
    """Blur ``image`` circularly with a Gaussian and quantize the measurement."""
    image = np.asarray(image, dtype=float)
    if np.any(np.abs(image) >= 1):
        raise OutOfRange("image values must lie in (-1, 1)")
    kernel = gaussian_kernel(sigma, support)
    _, kappa, op_norm = convolution_spectrum(kernel, image.shape)
    op = ConvolutionOperator(kernel, image.shape)
    y = quantize(op.matvec(image.ravel()), measurement_bits, MaxAbs()).dequantize()
    return ProblemSpec(op, y, image.ravel().copy(), op_norm, kappa,
                       {"family": "deconvolution", "sigma": sigma,
                        "support": f"{support[0]}x{support[1]}",
                        "measurement_bits": measurement_bits,
                        "grid": f"{image.shape[0]}x{image.shape[1]}"})


# --------------------------------------------------------------------------
# tomography
# --------------------------------------------------------------------------

def siddon_row(offset: float, angle: float, shape=(16, 16), pixel: float = 1.0) -> np.ndarray:
    """Path lengths of one parallel beam through each pixel of a centered grid.

    The beam runs along ``(cos a, sin a)`` at signed distance ``offset`` from
    the grid center. Row ``r`` of the image sits at the top, so pixel
    ``(r, c)`` covers ``x in [c - W/2, c + 1 - W/2]`` and
    ``y in [H/2 - r - 1, H/2 - r]`` in units of ``pixel``.
    """
    rows, cols = shape
    half_w, half_h = cols * pixel / 2, rows * pixel / 2
    d = np.array([math.cos(angle), math.sin(angle)])
    d[np.abs(d) < 1e-15] = 0.0
    p0 = offset * np.array([-d[1], d[0]])
    s_lo, s_hi = -math.inf, math.inf
    crossings = []
    for axis, half, n in ((0, half_w, cols), (1, half_h, rows)):
        planes = -half + pixel * np.arange(n + 1)
        if d[axis] == 0.0:
            if not -half < p0[axis] < half:
                return np.zeros(rows * cols)
            continue
        s = (planes - p0[axis]) / d[axis]
        s_lo = max(s_lo, float(s.min()))
        s_hi = min(s_hi, float(s.max()))
        crossings.append(s)
    if s_hi <= s_lo:
        return np.zeros(rows * cols)
    s_all = np.unique(np.concatenate(crossings + [np.array([s_lo, s_hi])]))
    s_all = s_all[(s_all >= s_lo) & (s_all <= s_hi)]
    lengths = np.diff(s_all)
    mids = 0.5 * (s_all[1:] + s_all[:-1])
    keep = lengths > 1e-12
    pts = p0[None, :] + mids[keep, None] * d[None, :]
    col = np.floor((pts[:, 0] + half_w) / pixel).astype(int)
    row = np.floor((half_h - pts[:, 1]) / pixel).astype(int)
    inside = (col >= 0) & (col < cols) & (row >= 0) & (row < rows)
    out = np.zeros(rows * cols)
    np.add.at(out, row[inside] * cols + col[inside], lengths[keep][inside])
    return out


def beam_offsets(n_beams: int, shape=(16, 16), pixel: float = 1.0) -> np.ndarray:
    """Cell-centered offsets spanning the grid diagonal."""
    half_diag = 0.5 * pixel * math.hypot(*shape)
    spacing = 2 * half_diag / n_beams
    return -half_diag + spacing * (np.arange(n_beams) + 0.5)


def tomography_matrix(n_projections: int = 60, n_beams: int = 31, angle_span: float = 180.0,
                      shape=(16, 16)) -> np.ndarray:
    angles = np.deg2rad(np.arange(n_projections) * angle_span / n_projections)
    rows = []
    dropped = 0
    for ang in angles:
        for t in beam_offsets(n_beams, shape):
            row = siddon_row(t, ang, shape)
            if np.any(row):
                rows.append(row)
            else:
                dropped += 1
    if dropped:
        warnings.warn(f"dropped {dropped} beams that miss the grid", DegenerateGeometry,
                      stacklevel=2)
    return np.array(rows)


def tomography_problem(image, n_projections: int = 60, n_beams: int = 31,
                       angle_span: float = 180.0) -> ProblemSpec:
    """Parallel-beam projections of a square image; ``y = A x*`` in double precision."""
    image = np.asarray(image, dtype=float)
    if np.any(np.abs(image) >= 1):
        raise OutOfRange("image values must lie in (-1, 1)")
    a = tomography_matrix(n_projections, n_beams, angle_span, image.shape)
    x_star = image.ravel().copy()
    g = a.T @ a
    return ProblemSpec(a, a @ x_star, x_star, spectral_norm(g), condition_number(g),
                       {"family": "tomography", "projections": n_projections,
                        "beams": n_beams, "angle_span": angle_span, "rows": a.shape[0],
                        "grid": f"{image.shape[0]}x{image.shape[1]}"})
