"""Software model of a block-systolic multiplier.

Weights are cut into 16x16 tiles and activations into 16x2 tiles, both
zero-padded. For each row of weight tiles the array cycles through every
activation tile column, summing products in signed 32-bit accumulators. The
host then masks each accumulator back to an L-bit mantissa window chosen by
the exponents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigInvalid, ShapeMismatch
from .fxnum import FixedArray

ACC_BITS = 32
MAX_OPERAND_BITS = 16


@dataclass(frozen=True)
class BlockedOperands:
    w_blocks: np.ndarray      # (R, C, block_rows, block_cols)
    x_blocks: np.ndarray      # (C, B, block_cols, batch_cols)
    w_shape: tuple
    x_shape: tuple
    expo_w: int
    expo_x: int
    bits: int

    @property
    def grid(self):
        r, c = self.w_blocks.shape[:2]
        return r, c, self.x_blocks.shape[1]


@dataclass(frozen=True)
class AccumulatorGrid:
    acc: np.ndarray           # int32, (R, B, block_rows, batch_cols)
    out_shape: tuple          # (rows, batch) before padding
    cycles: int


def _tiles(mat, rows, cols):
    h, w = mat.shape
    gr, gc = -(-h // rows), -(-w // cols)
    pad = np.zeros((gr * rows, gc * cols), dtype=np.int64)
    pad[:h, :w] = mat
    return pad.reshape(gr, rows, gc, cols).transpose(0, 2, 1, 3).copy()


def _untile(tiles, shape):
    gr, gc, rows, cols = tiles.shape
    full = tiles.transpose(0, 2, 1, 3).reshape(gr * rows, gc * cols)
    return full[:shape[0], :shape[1]]


def decompose(w: FixedArray, x: FixedArray, block_rows: int = 16, block_cols: int = 16,
              batch_cols: int = 2) -> BlockedOperands:
    """Zero-pad and tile a weight matrix and an activation batch (a vector is one column)."""
    if w.bits != x.bits:
        raise ConfigInvalid("operands must share a bit width")
    if w.bits > MAX_OPERAND_BITS:
        raise ConfigInvalid(f"systolic operands are limited to {MAX_OPERAND_BITS} bits")
    wm = np.asarray(w.mant)
    xm = np.asarray(x.mant)
    if xm.ndim == 1:
        xm = xm[:, None]
    if wm.ndim != 2 or wm.shape[1] != xm.shape[0]:
        raise ShapeMismatch(f"weights {wm.shape} vs activations {xm.shape}")
    return BlockedOperands(
        w_blocks=_tiles(wm, block_rows, block_cols),
        x_blocks=_tiles(xm, block_cols, batch_cols),
        w_shape=wm.shape, x_shape=xm.shape,
        expo_w=w.expo, expo_x=x.expo, bits=w.bits)


def reassemble(ops: BlockedOperands):
    """Inverse of :func:`decompose` on the mantissas: ``(w_mant, x_mant)``."""
    return _untile(ops.w_blocks, ops.w_shape), _untile(ops.x_blocks, ops.x_shape)


def block_multiply(ops: BlockedOperands) -> AccumulatorGrid:
    """Run the block schedule; the cycle count is the number of block issues.

    Raises :class:`AccumulatorOverflow` when any partial sum leaves the
    signed 32-bit range.
    """
    n_r, n_c, n_b = ops.grid
    acc = kernels.block_multiply(ops.w_blocks, ops.x_blocks)
    return AccumulatorGrid(acc, (ops.w_shape[0], ops.x_shape[1]), n_r * n_c * n_b)


def grid_to_matrix(grid: AccumulatorGrid) -> np.ndarray:
    n_r, n_b, br, bb = grid.acc.shape
    full = grid.acc.transpose(0, 2, 1, 3).reshape(n_r * br, n_b * bb)
    return full[:grid.out_shape[0], :grid.out_shape[1]]


def mask_result(acc, out_expo: int, expo_w: int, expo_x: int, bits: int = 8,
                rounding: str = "floor") -> FixedArray:
    """Select an L-bit window of each accumulator.

    Shifts right by ``out_expo - expo_w - expo_x + (L-1)`` (left if negative)
    and saturates to ``±(2**(L-1) - 1)``; the count of clipped elements is
    kept in ``n_saturated``.
    """
    if isinstance(acc, AccumulatorGrid):
        acc = grid_to_matrix(acc)
    acc = np.asarray(acc, dtype=np.int64)
    shift = out_expo - expo_w - expo_x + (bits - 1)
    mant, n_sat = kernels.requantize_shift(acc, shift, bits, rounding)
    return FixedArray(mant, out_expo, bits, n_saturated=n_sat)


def systolic_matvec(w: FixedArray, x: FixedArray, out_expo: int,
                    rounding: str = "floor"):
    """Full pipeline; returns ``(result, stats)`` with block issues and saturations."""
    ops = decompose(w, x)
    grid = block_multiply(ops)
    out = mask_result(grid, out_expo, ops.expo_w, ops.expo_x, w.bits, rounding)
    if x.mant.ndim == 1:
        out = FixedArray(out.mant[:, 0], out.expo, out.bits, n_saturated=out.n_saturated)
    return out, {"block_issues": grid.cycles, "saturated": out.n_saturated}
