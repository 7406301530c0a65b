# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and FFT kernels.

Same interface as ``_kernels_py``: each function returns ``(result, macs)``
with ``macs`` counting the multiply-accumulates actually executed.
"""

import numpy as np


def conv_dense(double[::1] y, double[::1] taps):
    """Direct linear convolution as a typed double loop."""
    cdef Py_ssize_t ny = y.shape[0]
    cdef Py_ssize_t ntaps = taps.shape[0]
    out_arr = np.zeros(ny + ntaps - 1)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double tap
    cdef long long macs = 0
    for k in range(ntaps):
        tap = taps[k]
        for i in range(ny):
            out[k + i] += tap * y[i]
            macs += 1
    return out_arr, macs


def conv_sparse(double[::1] y, long long[::1] indices, double[::1] values,
                Py_ssize_t length):
    """Direct linear convolution touching only the non-zero taps."""
    cdef Py_ssize_t ny = y.shape[0]
    cdef Py_ssize_t nnze = indices.shape[0]
    out_arr = np.zeros(ny + length - 1)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, t, k
    cdef double v
    cdef long long macs = 0
    for t in range(nnze):
        k = <Py_ssize_t> indices[t]
        v = values[t]
        for i in range(ny):
            out[k + i] += v * y[i]
            macs += 1
    return out_arr, macs


def fft(double complex[::1] data, long long[::1] bitrev,
        double complex[::1] twiddles, bint inverse):
    """Iterative radix-2 transform over a power-of-two-length complex array."""
    cdef Py_ssize_t n = data.shape[0]
    out_arr = np.empty(n, dtype=np.complex128)
    cdef double complex[::1] a = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        a[i] = data[<Py_ssize_t> bitrev[i]]

    cdef Py_ssize_t size = 2
    cdef Py_ssize_t half, stride, start, k
    cdef double complex tw, spun
    cdef long long macs = 0
    while size <= n:
        half = size >> 1
        stride = n // size
        for start in range(0, n, size):
            for k in range(half):
                tw = twiddles[k * stride]
                if inverse:
                    tw = tw.conjugate()
                spun = tw * a[start + half + k]
                a[start + half + k] = a[start + k] - spun
                a[start + k] = a[start + k] + spun
                macs += 1
        size <<= 1
    if inverse:
        for i in range(n):
            a[i] = a[i] / n
    return out_arr, macs
