# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``.

Accumulation order matches the numpy fallback so outputs are bit-identical.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int p = k // 2
    cdef Py_ssize_t ck = c * k * k
    out_arr = np.zeros((b, h, w, ck))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, yi, xi, ci, i, j, sy, sx, col
    for bi in range(b):
        for yi in range(h):
            for xi in range(w):
                col = 0
                for ci in range(c):
                    for i in range(k):
                        sy = yi + i - p
                        for j in range(k):
                            sx = xi + j - p
                            if 0 <= sy < h and 0 <= sx < w:
                                out[bi, yi, xi, col] = x[bi, ci, sy, sx]
                            col += 1
    return out_arr


def col2im(double[:, :, :, ::1] cols, int c, int k):
    cdef Py_ssize_t b = cols.shape[0], h = cols.shape[1], w = cols.shape[2]
    cdef int p = k // 2
    out_arr = np.zeros((b, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, yi, xi, ty, tx, base
    # i, j outermost per (b, c) keeps the per-element summation order of the fallback
    for bi in range(b):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    base = (ci * k + i) * k + j
                    for yi in range(h):
                        ty = yi + i - p
                        if ty < 0 or ty >= h:
                            continue
                        for xi in range(w):
                            tx = xi + j - p
                            if 0 <= tx < w:
                                out[bi, ci, ty, tx] += cols[bi, yi, xi, base]
    return out_arr


def span_pool(double[:, ::1] feats, str mode):
    cdef Py_ssize_t n = feats.shape[0], d = feats.shape[1]
    out_arr = np.zeros((d, n, n))
    cdef double[:, :, ::1] out = out_arr
    run_arr = np.empty(d)
    cdef double[::1] run = run_arr
    cdef Py_ssize_t a, bb, di
    cdef double v
    cdef bint use_max
    if mode == "max":
        use_max = True
    elif mode == "mean":
        use_max = False
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    for a in range(n):
        for di in range(d):
            run[di] = feats[a, di]
            out[di, a, a] = run[di]
        for bb in range(a + 1, n):
            for di in range(d):
                v = feats[bb, di]
                if use_max:
                    if v > run[di]:
                        run[di] = v
                    out[di, a, bb] = run[di]
                else:
                    run[di] = run[di] + v
                    out[di, a, bb] = run[di] / (bb - a + 1)
    return out_arr


def im2col_nhwc(double[:, :, :, ::1] x, int k, cnp.int64_t[:, ::1] pos):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t npos = pos.shape[0]
    cdef int p = k // 2
    cdef Py_ssize_t row = k * k * c
    out_arr = np.empty((b, npos, row))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, q, yi, xi, i, j, sy, sx
    cdef double* dst
    for bi in range(b):
        for q in range(npos):
            yi = pos[q, 0]
            xi = pos[q, 1]
            dst = &out[bi, q, 0]
            for i in range(k):
                sy = yi + i - p
                for j in range(k):
                    sx = xi + j - p
                    if 0 <= sy < h and 0 <= sx < w:
                        memcpy(dst, &x[bi, sy, sx, 0], c * sizeof(double))
                    else:
                        memset(dst, 0, c * sizeof(double))
                    dst += c
    return out_arr


def col2im_nhwc(double[:, :, ::1] cols, cnp.int64_t[:, ::1] pos, int h, int w, int c, int k):
    cdef Py_ssize_t b = cols.shape[0], npos = pos.shape[0]
    cdef int p = k // 2
    out_arr = np.zeros((b, h, w, c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, i, j, q, ci, ty, tx, base
    cdef double* dst
    cdef const double* src
    # positions are row-major sorted, so per output element the summation order
    # (over i, j) matches the fallback's shift-and-add loop
    for bi in range(b):
        for i in range(k):
            for j in range(k):
                base = (i * k + j) * c
                for q in range(npos):
                    ty = pos[q, 0] + i - p
                    tx = pos[q, 1] + j - p
                    if ty < 0 or ty >= h or tx < 0 or tx >= w:
                        continue
                    dst = &out[bi, ty, tx, 0]
                    src = &cols[bi, q, base]
                    for ci in range(c):
                        dst[ci] += src[ci]
    return out_arr
