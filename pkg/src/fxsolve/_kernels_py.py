"""Pure numpy implementations of the integer hot kernels.

Semantics match ``_kernels.pyx`` bit-for-bit; the compiled module is preferred
when it imports.
"""
import numpy as np

from .errors import AccumulatorOverflow

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def requantize_shift(acc, shift, bits, rounding):
    """Shift int64 values right by ``shift`` bits (left if negative) and saturate.

    Returns ``(mant, n_saturated)``; ``rounding`` is ``"trunc"`` (toward zero)
    or ``"floor"`` (arithmetic shift).
    """
    acc = np.asarray(acc, dtype=np.int64)
    limit = (1 << (bits - 1)) - 1
    if shift >= 0:
        s = min(int(shift), 63)
        if rounding == "floor":
            out = acc >> s
        else:
            out = np.where(acc < 0, -((-acc) >> s), acc >> s)
        sat = np.abs(out) > limit
    else:
        s = -int(shift)
        if s >= 63:
            sat = acc != 0
            out = np.zeros_like(acc)
        else:
            sat = np.abs(acc) > (limit >> s)
            out = np.where(sat, 0, acc) << s
    out = np.where(sat, np.where(acc < 0, -limit, limit), out)
    return out.astype(np.int64), int(np.count_nonzero(sat))


def block_multiply(w_tiles, x_tiles):
    """Emulate the block-systolic schedule with 32-bit accumulators.

    ``w_tiles`` has shape (R, C, br, bc), ``x_tiles`` (C, B, bc, bb). For each
    row of weight blocks the array cycles through every activation block
    column, accumulating partial products; returns an int32 array of shape
    (R, B, br, bb).
    """
    w_tiles = np.asarray(w_tiles, dtype=np.int64)
    x_tiles = np.asarray(x_tiles, dtype=np.int64)
    n_r, n_c, br, _ = w_tiles.shape
    n_b, bb = x_tiles.shape[1], x_tiles.shape[3]
    out = np.zeros((n_r, n_b, br, bb), dtype=np.int32)
    for r in range(n_r):
        for b in range(n_b):
            acc = np.zeros((br, bb), dtype=np.int64)
            for c in range(n_c):
                acc += w_tiles[r, c] @ x_tiles[c, b]
                if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
                    raise AccumulatorOverflow(
                        f"32-bit accumulator overflow at block ({r}, {c}, {b})")
            out[r, b] = acc
    return out


def stencil_conv(x, stencil):
    """Circular 2-D convolution of an int64 grid with a centered odd-sized stencil."""
    x = np.asarray(x, dtype=np.int64)
    stencil = np.asarray(stencil, dtype=np.int64)
    kh, kw = stencil.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            v = stencil[p, q]
            if v:
                out += v * np.roll(x, (p - ch, q - cw), axis=(0, 1))
    return out
