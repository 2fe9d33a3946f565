# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sliding-window kernels for strided 1-D convolution."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


def unfold1d(x, Py_ssize_t kernel, Py_ssize_t stride):
    cdef double[:, :, ::1] src = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = src.shape[0], length = src.shape[1], c = src.shape[2]
    cdef Py_ssize_t l_out = (length - kernel) // stride + 1
    out_arr = np.empty((b, l_out, kernel * c), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, t
    cdef size_t row = kernel * c * sizeof(double)
    if b == 0 or l_out <= 0 or c == 0:
        return out_arr
    with nogil:
        # a window of kernel consecutive (C,) rows is one contiguous block
        for i in range(b):
            for t in range(l_out):
                memcpy(&out[i, t, 0], &src[i, t * stride, 0], row)
    return out_arr


def fold1d(cols, Py_ssize_t length, Py_ssize_t kernel, Py_ssize_t stride):
    cdef double[:, :, ::1] src = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t b = src.shape[0], l_out = src.shape[1]
    cdef Py_ssize_t c = src.shape[2] // kernel
    out_arr = np.zeros((b, length, c), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, t, k, ch, base
    with nogil:
        for i in range(b):
            for t in range(l_out):
                base = t * stride
                for k in range(kernel):
                    for ch in range(c):
                        out[i, base + k, ch] += src[i, t, k * c + ch]
    return out_arr


cdef extern from "math.h" nogil:
    double erf(double x)
    double exp(double x)


def gelu(x):
    """Exact GELU of ``x`` and its derivative, computed in one pass."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] src = arr.reshape(-1)
    out_arr = np.empty_like(arr)
    der_arr = np.empty_like(arr)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef double[::1] der = der_arr.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double v, cdf
    with nogil:
        for i in range(n):
            v = src[i]
            # past |v| = 10 the tail terms are below 1e-22; skipping them
            # avoids subnormal exp() results, which are very slow
            if v > 10.0:
                out[i] = v
                der[i] = 1.0
            elif v < -10.0:
                out[i] = 0.0
                der[i] = 0.0
            else:
                cdf = 0.5 * (1.0 + erf(v * 0.7071067811865476))
                out[i] = v * cdf
                der[i] = cdf + v * 0.3989422804014327 * exp(-0.5 * v * v)
    return out_arr, der_arr
