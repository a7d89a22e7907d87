# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Contracts mirror ``_npkernels.py`` exactly; the test suite runs both
backends against each other whenever this extension is importable.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

BACKEND = "compiled"


def bilinear_sample_forward(double[:, :, ::1] feat, double[::1] ys, double[::1] xs):
    cdef Py_ssize_t h = feat.shape[0]
    cdef Py_ssize_t w = feat.shape[1]
    cdef Py_ssize_t c = feat.shape[2]
    cdef Py_ssize_t n = ys.shape[0]
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, y0, x0, dy, dx, yy, xx
    cdef double fy, fx, wt
    for i in range(n):
        y0 = <Py_ssize_t>floor(ys[i])
        x0 = <Py_ssize_t>floor(xs[i])
        fy = ys[i] - y0
        fx = xs[i] - x0
        for dy in range(2):
            yy = y0 + dy
            if yy < 0 or yy >= h:
                continue
            for dx in range(2):
                xx = x0 + dx
                if xx < 0 or xx >= w:
                    continue
                wt = (fy if dy == 1 else 1.0 - fy) * (fx if dx == 1 else 1.0 - fx)
                for k in range(c):
                    out[i, k] += wt * feat[yy, xx, k]
    return out_arr


def bilinear_sample_backward(
    double[:, :, ::1] feat, double[::1] ys, double[::1] xs, double[:, ::1] grad_out
):
    cdef Py_ssize_t h = feat.shape[0]
    cdef Py_ssize_t w = feat.shape[1]
    cdef Py_ssize_t c = feat.shape[2]
    cdef Py_ssize_t n = ys.shape[0]
    gf_arr = np.zeros((h, w, c), dtype=np.float64)
    gy_arr = np.zeros(n, dtype=np.float64)
    gx_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, :, ::1] gf = gf_arr
    cdef double[::1] gy = gy_arr
    cdef double[::1] gx = gx_arr
    cdef Py_ssize_t i, k, y0, x0, dy, dx, yy, xx
    cdef double fy, fx, wt, dwy, dwx, dot
    for i in range(n):
        y0 = <Py_ssize_t>floor(ys[i])
        x0 = <Py_ssize_t>floor(xs[i])
        fy = ys[i] - y0
        fx = xs[i] - x0
        for dy in range(2):
            yy = y0 + dy
            if yy < 0 or yy >= h:
                continue
            for dx in range(2):
                xx = x0 + dx
                if xx < 0 or xx >= w:
                    continue
                wt = (fy if dy == 1 else 1.0 - fy) * (fx if dx == 1 else 1.0 - fx)
                dwy = (fx if dx == 1 else 1.0 - fx) * (1.0 if dy == 1 else -1.0)
                dwx = (fy if dy == 1 else 1.0 - fy) * (1.0 if dx == 1 else -1.0)
                dot = 0.0
                for k in range(c):
                    gf[yy, xx, k] += wt * grad_out[i, k]
                    dot += grad_out[i, k] * feat[yy, xx, k]
                gy[i] += dwy * dot
                gx[i] += dwx * dot
    return gf_arr, gy_arr, gx_arr


def rle_encode(mask):
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] flat = np.ascontiguousarray(
        np.asarray(mask, dtype=np.uint8).flatten(order="F")
    )
    cdef Py_ssize_t n = flat.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # first pass: count runs so the output can be preallocated
    cdef Py_ssize_t i, n_runs = 1
    for i in range(1, n):
        if flat[i] != flat[i - 1]:
            n_runs += 1
    cdef Py_ssize_t lead = 1 if flat[0] == 1 else 0
    out_arr = np.zeros(n_runs + lead, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t pos = lead
    cdef long long run = 1
    for i in range(1, n):
        if flat[i] == flat[i - 1]:
            run += 1
        else:
            out[pos] = run
            pos += 1
            run = 1
    out[pos] = run
    return out_arr


def rle_decode(counts, Py_ssize_t height, Py_ssize_t width):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cts = np.ascontiguousarray(
        np.asarray(counts, dtype=np.int64)
    )
    cdef Py_ssize_t total = 0
    cdef Py_ssize_t i, j
    for i in range(cts.shape[0]):
        total += cts[i]
    if total != height * width:
        raise ValueError(
            f"run-length counts sum to {total}, expected {height * width}"
        )
    flat_arr = np.zeros(height * width, dtype=np.uint8)
    cdef unsigned char[::1] flat = flat_arr
    cdef Py_ssize_t pos = 0
    cdef unsigned char val = 0
    for i in range(cts.shape[0]):
        if val == 1:
            for j in range(pos, pos + cts[i]):
                flat[j] = 1
        pos += cts[i]
        val = 1 - val
    return flat_arr.reshape((height, width), order="F")


cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    #define uwovis_popcount64(x) __builtin_popcountll(x)
    #else
    static inline int uwovis_popcount64(unsigned long long v) {
        int c = 0;
        while (v) { v &= v - 1; c++; }
        return c;
    }
    #endif
    """
    int uwovis_popcount64(unsigned long long v) nogil


def _pack_words(flat):
    """Rows of bits -> rows of 64-bit words, zero padded."""
    n, m = flat.shape
    words = max((m + 63) >> 6, 1)
    packed_bytes = np.packbits(flat, axis=1, bitorder="little")
    padded = np.zeros((n, words * 8), dtype=np.uint8)
    padded[:, : packed_bytes.shape[1]] = packed_bytes
    return np.ascontiguousarray(padded.view(np.uint64))


def mask_iou_matrix(a, b):
    """Bit-packed pairwise IoU: AND popcounts over 64-bit words."""
    a = np.asarray(a)
    b = np.asarray(b)
    af = (a != 0).reshape(a.shape[0], -1).astype(np.uint8)
    bf = (b != 0).reshape(b.shape[0], -1).astype(np.uint8)
    cdef Py_ssize_t n = af.shape[0]
    cdef Py_ssize_t g = bf.shape[0]
    cdef Py_ssize_t words = max((af.shape[1] + 63) >> 6, 1)
    cdef unsigned long long[:, ::1] pa = _pack_words(af)
    cdef unsigned long long[:, ::1] pb = _pack_words(bf)

    area_a_arr = np.zeros(n, dtype=np.int64)
    area_b_arr = np.zeros(g, dtype=np.int64)
    cdef long long[::1] area_a = area_a_arr
    cdef long long[::1] area_b = area_b_arr
    cdef Py_ssize_t i, j, w
    for i in range(n):
        for w in range(words):
            area_a[i] += uwovis_popcount64(pa[i, w])
    for j in range(g):
        for w in range(words):
            area_b[j] += uwovis_popcount64(pb[j, w])

    out_arr = np.zeros((n, g), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef long long inter, union_
    for i in range(n):
        for j in range(g):
            inter = 0
            for w in range(words):
                inter += uwovis_popcount64(pa[i, w] & pb[j, w])
            union_ = area_a[i] + area_b[j] - inter
            if union_ > 0:
                out[i, j] = inter / <double>union_
    return out_arr
