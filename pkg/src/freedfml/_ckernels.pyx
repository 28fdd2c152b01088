# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise softmax / CE / KL kernels and the FNV-1a checksum.

Signatures mirror ``_kernels_py``; callers pass C-contiguous float64 arrays.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from libc.stdint cimport uint64_t

cnp.import_array()

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


cdef void _lsm_row(const double[:, ::1] x, double[:, ::1] out, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t j, c = x.shape[1]
    cdef double m = x[i, 0], s = 0.0, ls
    for j in range(1, c):
        if x[i, j] > m:
            m = x[i, j]
    for j in range(c):
        s += exp(x[i, j] - m)
    ls = log(s)
    for j in range(c):
        out[i, j] = (x[i, j] - m) - ls


def log_softmax_rows(x):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xv.shape[0]):
            _lsm_row(xv, ov, i)
    return out


def softmax_rows(x):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], i, j
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double m, s
    with nogil:
        for i in range(n):
            m = xv[i, 0]
            for j in range(1, c):
                if xv[i, j] > m:
                    m = xv[i, j]
            s = 0.0
            for j in range(c):
                ov[i, j] = exp(xv[i, j] - m)
                s += ov[i, j]
            for j in range(c):
                ov[i, j] = ov[i, j] / s
    return out


def cross_entropy_fwd_bwd(logits, labels):
    cdef const double[:, ::1] xv = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const long[::1] lv = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], i, j
    grad = np.empty((b, c), dtype=np.float64)
    cdef double[:, ::1] gv = grad
    cdef double total = 0.0
    with nogil:
        for i in range(b):
            _lsm_row(xv, gv, i)
            total -= gv[i, lv[i]]
            for j in range(c):
                gv[i, j] = exp(gv[i, j]) / b
            gv[i, lv[i]] -= 1.0 / b
    return total / b, grad


def kl_rows(p_logits, q_logits):
    cdef const double[:, ::1] pv = np.ascontiguousarray(p_logits, dtype=np.float64)
    cdef const double[:, ::1] qv = np.ascontiguousarray(q_logits, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0], c = pv.shape[1], i, j
    lp = np.empty((n, c), dtype=np.float64)
    lq = np.empty((n, c), dtype=np.float64)
    rows = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] lpv = lp
    cdef double[:, ::1] lqv = lq
    cdef double[::1] rv = rows
    cdef double s
    with nogil:
        for i in range(n):
            _lsm_row(pv, lpv, i)
            _lsm_row(qv, lqv, i)
            s = 0.0
            for j in range(c):
                s += exp(lpv[i, j]) * (lpv[i, j] - lqv[i, j])
            rv[i] = s
    return rows, lp, lq


def kl_grads(lp, lq, weights):
    cdef const double[:, ::1] lpv = np.ascontiguousarray(lp, dtype=np.float64)
    cdef const double[:, ::1] lqv = np.ascontiguousarray(lq, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = lpv.shape[0], c = lpv.shape[1], i, j
    gp = np.empty((n, c), dtype=np.float64)
    gq = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] gpv = gp
    cdef double[:, ::1] gqv = gq
    cdef double inner, p, w
    with nogil:
        for i in range(n):
            w = wv[i]
            inner = 0.0
            for j in range(c):
                inner += exp(lpv[i, j]) * (lpv[i, j] - lqv[i, j])
            for j in range(c):
                p = exp(lpv[i, j])
                gpv[i, j] = w * p * ((lpv[i, j] - lqv[i, j]) - inner)
                gqv[i, j] = w * (exp(lqv[i, j]) - p)
    return gp, gq


def fnv1a64(data):
    cdef const unsigned char[::1] buf = memoryview(bytes(data)).cast("B")
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    with nogil:
        for i in range(buf.shape[0]):
            h ^= buf[i]
            h *= 0x100000001B3ULL
    return int(h)
