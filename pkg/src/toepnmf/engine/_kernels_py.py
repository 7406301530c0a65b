"""NumPy implementations of the convolution and FFT kernels.

Mirrors the compiled extension's interface and is selected at import time
when the extension is missing or ``TOEPNMF_FORCE_PY`` is set.  Every kernel
returns ``(result, macs)`` where ``macs`` counts the multiply-accumulate
operations the call actually performed (complex butterflies for the FFT).
"""

from __future__ import annotations

import numpy as np


def conv_dense(y: np.ndarray, taps: np.ndarray):
    """Direct linear convolution, one vectorized pass per tap."""
    ny = y.shape[0]
    ntaps = taps.shape[0]
    out = np.zeros(ny + ntaps - 1)
    macs = 0
    for k in range(ntaps):
        out[k : k + ny] += taps[k] * y
        macs += ny
    return out, macs


def conv_sparse(y: np.ndarray, indices: np.ndarray, values: np.ndarray, length: int):
    """Direct linear convolution touching only the non-zero taps.

    ``length`` is the dense length of the filter, which fixes the output
    length even when trailing taps are zero.
    """
    ny = y.shape[0]
    out = np.zeros(ny + length - 1)
    macs = 0
    for k, v in zip(indices, values):
        out[k : k + ny] += v * y
        macs += ny
    return out, macs


def fft(data: np.ndarray, bitrev: np.ndarray, twiddles: np.ndarray, inverse: bool):
    """Iterative radix-2 transform over a power-of-two-length complex array.

    ``bitrev`` is the input permutation and ``twiddles`` the length-n/2
    table ``exp(-2j*pi*k/n)``; both come precomputed from the caller so
    repeated transforms of one size share them.
    """
    a = np.asarray(data, dtype=np.complex128)[bitrev]
    n = a.shape[0]
    macs = 0
    size = 2
    while size <= n:
        half = size // 2
        stride = n // size
        tw = twiddles[::stride]
        if inverse:
            tw = tw.conj()
        blocks = a.reshape(n // size, size)
        spun = blocks[:, half:] * tw
        blocks[:, half:] = blocks[:, :half] - spun
        blocks[:, :half] += spun
        macs += (n // size) * half
        size *= 2
    if inverse:
        a = a / n
    return a, macs
