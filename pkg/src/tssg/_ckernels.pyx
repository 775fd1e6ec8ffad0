# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Summation order matches the numpy versions tap by tap; build without
-ffast-math / FP contraction to keep results bit-identical.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c * 9, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, k, dy, dx, i, j, i0, i1, j0, j1
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                src = &x[b, ch, 0, 0]
                for k in range(9):
                    dy = k // 3 - 1
                    dx = k % 3 - 1
                    dst = &out[b, ch * 9 + k, 0]
                    i0 = 1 if dy < 0 else 0
                    i1 = h - 1 if dy > 0 else h
                    j0 = 1 if dx < 0 else 0
                    j1 = w - 1 if dx > 0 else w
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            dst[i * w + j] = src[(i + dy) * w + j + dx]
    return out_arr


def col2im3x3(real[:, :, ::1] cols, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1] // 9
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, k, dy, dx, i, j, i0, i1, j0, j1
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                dst = &out[b, ch, 0, 0]
                for k in range(9):
                    dy = k // 3 - 1
                    dx = k % 3 - 1
                    src = &cols[b, ch * 9 + k, 0]
                    i0 = 1 if dy < 0 else 0
                    i1 = h - 1 if dy > 0 else h
                    j0 = 1 if dx < 0 else 0
                    j1 = w - 1 if dx > 0 else w
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            dst[(i + dy) * w + j + dx] += src[i * w + j]
    return out_arr


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j, di, dj, best
    cdef real v, bv
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = (2 * i) * w + 2 * j
                        bv = x[b, ch, 2 * i, 2 * j]
                        for di in range(2):
                            for dj in range(2):
                                v = x[b, ch, 2 * i + di, 2 * j + dj]
                                # strict > keeps the lowest flat index on ties
                                if v > bv:
                                    bv = v
                                    best = (2 * i + di) * w + 2 * j + dj
                        out[b, ch, i, j] = bv
                        idx[b, ch, i, j] = best
    return out_arr, idx_arr


def unpool2x2(real[:, :, :, ::1] x, cnp.int64_t[:, :, :, ::1] idx, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], ho = x.shape[2], wo = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        out[b, ch, idx[b, ch, i, j]] = x[b, ch, i, j]
    return out_arr.reshape(n, c, h, w)


def unpool2x2_gather(real[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = idx.shape[0], c = idx.shape[1], ho = idx.shape[2], wo = idx.shape[3]
    cdef Py_ssize_t w = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, f
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        f = idx[b, ch, i, j]
                        out[b, ch, i, j] = g[b, ch, f // w, f % w]
    return out_arr


cdef void _interval_gradient_line(const double[::1] line, const double[::1] wts, int r,
                                  double[::1] out) noexcept nogil:
    cdef Py_ssize_t length = line.shape[0], npos = length - 1
    cdef Py_ssize_t p, d
    cdef double rnum, rden, lnum, lden
    for p in range(npos):
        rnum = 0.0
        rden = 0.0
        lnum = 0.0
        lden = 0.0
        for d in range(r + 1):
            if p + 1 + d <= length - 1:
                rnum += wts[d] * line[p + 1 + d]
                rden += wts[d]
            if p - d >= 0:
                lnum += wts[d] * line[p - d]
                lden += wts[d]
        out[p] = rnum / rden - lnum / lden


def _weights(int r):
    cdef double sigma = r / 2.0
    d = np.arange(r + 1, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def interval_gradient_lines(double[:, ::1] lines, int r):
    cdef Py_ssize_t m = lines.shape[0], length = lines.shape[1]
    out_arr = np.empty((m, length - 1), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] wts = _weights(r)
    cdef Py_ssize_t row
    with nogil:
        for row in range(m):
            _interval_gradient_line(lines[row], wts, r, out[row])
    return out_arr


def rescale_lines(double[:, :, ::1] lines, int r, double eps_s):
    cdef Py_ssize_t nch = lines.shape[0], m = lines.shape[1], length = lines.shape[2]
    cdef Py_ssize_t npos = length - 1
    ig_arr = np.empty((nch, m, npos), dtype=np.float64)
    out_arr = np.empty((nch, m, npos), dtype=np.float64)
    w_arr = np.empty((m, npos), dtype=np.float64)
    cdef double[:, :, ::1] ig = ig_arr
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] weight = w_arr
    cdef double[::1] wts = _weights(r)
    cdef Py_ssize_t c, row, p
    cdef double num, den, g, wp, gi
    with nogil:
        for c in range(nch):
            for row in range(m):
                _interval_gradient_line(lines[c, row], wts, r, ig[c, row])
        for row in range(m):
            for p in range(npos):
                num = 0.0
                den = 0.0
                for c in range(nch):
                    num += fabs(ig[c, row, p])
                    den += fabs(lines[c, row, p + 1] - lines[c, row, p])
                wp = (num + nch * eps_s) / (den + nch * eps_s)
                if wp > 1.0:
                    wp = 1.0
                weight[row, p] = wp
                for c in range(nch):
                    g = lines[c, row, p + 1] - lines[c, row, p]
                    gi = ig[c, row, p]
                    if _sign(g) == _sign(gi):
                        out[c, row, p] = g * wp
                    else:
                        out[c, row, p] = 0.0
    return out_arr, w_arr


cdef inline int _sign(double v) noexcept nogil:
    if v > 0:
        return 1
    if v < 0:
        return -1
    return 0
