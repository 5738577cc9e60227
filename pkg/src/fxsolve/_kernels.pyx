# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled integer kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, int32_t

from .errors import AccumulatorOverflow

cnp.import_array()

cdef int64_t INT32_MIN = -(1 << 31)
cdef int64_t INT32_MAX = (1 << 31) - 1


def requantize_shift(acc, long shift, int bits, rounding):
    cdef const int64_t[::1] a = np.ascontiguousarray(acc, dtype=np.int64).ravel()
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty(a.shape[0], dtype=np.int64)
    cdef int64_t limit = (<int64_t>1 << (bits - 1)) - 1
    cdef Py_ssize_t i, n = a.shape[0]
    cdef int64_t v, r
    cdef long s
    cdef bint floor_mode = rounding == "floor"
    cdef long n_sat = 0
    for i in range(n):
        v = a[i]
        if shift >= 0:
            s = shift if shift < 63 else 63
            if floor_mode or v >= 0:
                r = v >> s
            else:
                r = -((-v) >> s)
            if r > limit:
                r = limit
                n_sat += 1
            elif r < -limit:
                r = -limit
                n_sat += 1
        else:
            s = -shift
            if s >= 63:
                if v != 0:
                    r = limit if v > 0 else -limit
                    n_sat += 1
                else:
                    r = 0
            elif v > (limit >> s):
                r = limit
                n_sat += 1
            elif v < -(limit >> s):
                r = -limit
                n_sat += 1
            else:
                r = v << s
        out[i] = r
    return out.reshape(np.shape(acc)), n_sat


def block_multiply(w_tiles, x_tiles):
    cdef const int64_t[:, :, :, ::1] w = np.ascontiguousarray(w_tiles, dtype=np.int64)
    cdef const int64_t[:, :, :, ::1] x = np.ascontiguousarray(x_tiles, dtype=np.int64)
    cdef Py_ssize_t n_r = w.shape[0], n_c = w.shape[1], br = w.shape[2], bc = w.shape[3]
    cdef Py_ssize_t n_b = x.shape[1], bb = x.shape[3]
    res = np.zeros((n_r, n_b, br, bb), dtype=np.int32)
    cdef int32_t[:, :, :, ::1] out = res
    cdef int64_t[:, ::1] acc = np.zeros((br, bb), dtype=np.int64)
    cdef Py_ssize_t r, b, c, i, j, t
    cdef int64_t s
    for r in range(n_r):
        for b in range(n_b):
            acc[:, :] = 0
            for c in range(n_c):
                for i in range(br):
                    for j in range(bb):
                        s = 0
                        for t in range(bc):
                            s += w[r, c, i, t] * x[c, b, t, j]
                        s += acc[i, j]
                        if s > INT32_MAX or s < INT32_MIN:
                            raise AccumulatorOverflow(
                                f"32-bit accumulator overflow at block ({r}, {c}, {b})")
                        acc[i, j] = s
            for i in range(br):
                for j in range(bb):
                    out[r, b, i, j] = <int32_t>acc[i, j]
    return res


def stencil_conv(x, stencil):
    cdef const int64_t[:, ::1] xv = np.ascontiguousarray(x, dtype=np.int64)
    cdef const int64_t[:, ::1] sv = np.ascontiguousarray(stencil, dtype=np.int64)
    cdef Py_ssize_t h = xv.shape[0], w = xv.shape[1]
    cdef Py_ssize_t kh = sv.shape[0], kw = sv.shape[1]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    res = np.zeros((h, w), dtype=np.int64)
    cdef int64_t[:, ::1] out = res
    cdef Py_ssize_t i, j, p, q, ii, jj, roff, coff
    cdef int64_t v
    # tap-major: out[i, j] += s[p, q] * x[i - (p - ch), j - (q - cw)] (indices mod grid)
    for p in range(kh):
        roff = ((ch - p) % h + h) % h
        for q in range(kw):
            v = sv[p, q]
            if v == 0:
                continue
            coff = ((cw - q) % w + w) % w
            for i in range(h):
                ii = i + roff
                if ii >= h:
                    ii -= h
                jj = coff
                for j in range(w):
                    out[i, j] += v * xv[ii, jj]
                    jj += 1
                    if jj == w:
                        jj = 0
    return res
