"""Toeplitz structure helpers for the shared resonance filter.

A Toeplitz matrix of shape (rows, cols) is constant along each diagonal:
``F[i, j] = theta[j - i]``.  Diagonal indices run from ``-(rows - 1)``
(bottom-left corner) to ``cols - 1`` (top-right corner).  The *constrained*
form used for the resonance filter additionally zeroes every diagonal
outside ``[cols - rows, 0]``, which makes ``F @ g`` a plain causal
convolution of ``g`` with the ``rows - cols + 1`` retained diagonal values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ToeplitzParams:
    """Diagonal parameterization of a (possibly constrained) Toeplitz matrix.

    ``diagonals[d]`` holds the value of diagonal ``d - (rows - 1)``, so the
    array is ordered bottom-left to top-right and has length
    ``rows + cols - 1``.
    """

    diagonals: np.ndarray
    rows: int
    cols: int
    constrained: bool = False

    def __post_init__(self):
        self.diagonals = np.asarray(self.diagonals, dtype=np.float64)
        if self.rows < 1 or self.cols < 1:
            raise DataError("Toeplitz shape must be positive")
        if self.diagonals.shape != (self.rows + self.cols - 1,):
            raise DataError(
                "expected %d diagonal values for shape (%d, %d), got %d"
                % (self.rows + self.cols - 1, self.rows, self.cols, len(self.diagonals))
            )
        if self.constrained:
            if self.cols > self.rows:
                raise DataError(
                    "constrained form needs rows >= cols, got (%d, %d)"
                    % (self.rows, self.cols)
                )
            band = np.zeros_like(self.diagonals)
            lo, hi = self.band_limits()
            band[lo + self.rows - 1 : hi + self.rows] = 1.0
            outside = self.diagonals[band == 0.0]
            if outside.size and np.any(outside != 0.0):
                raise DataError("constrained Toeplitz has nonzero diagonals outside the band")

    def band_limits(self) -> tuple[int, int]:
        """Inclusive diagonal-index range ``[cols - rows, 0]`` of the constrained band."""
        return self.cols - self.rows, 0

    def diagonal(self, k: int) -> float:
        """Value of diagonal ``k`` (0 is the main diagonal, positive is above)."""
        if not -(self.rows - 1) <= k <= self.cols - 1:
            return 0.0
        return float(self.diagonals[k + self.rows - 1])

    def resonance_taps(self) -> np.ndarray:
        """Causal filter taps ``(theta_0, theta_-1, ...)`` of the constrained band.

        Convolving these taps with a length-``cols`` signal reproduces the
        dense matrix-vector product, see :func:`constrained_product`.
        """
        if not self.constrained:
            raise DataError("resonance taps are only defined for the constrained form")
        # Band diagonals live at array indices cols-1 .. rows-1; reversing
        # puts theta_0 first.
        return self.diagonals[self.cols - 1 : self.rows][::-1].copy()

    def to_dense(self) -> np.ndarray:
        """Materialize the full (rows, cols) matrix."""
        i = np.arange(self.rows)[:, None]
        j = np.arange(self.cols)[None, :]
        return self.diagonals[(j - i) + self.rows - 1]


def params_from_resonance_taps(taps: np.ndarray, rows: int, cols: int) -> ToeplitzParams:
    """Build constrained Toeplitz parameters whose band holds ``taps``.

    ``taps`` must have length ``rows - cols + 1``; ``taps[0]`` becomes the
    main diagonal and ``taps[p]`` diagonal ``-p``.
    """
    taps = np.asarray(taps, dtype=np.float64)
    if taps.shape != (rows - cols + 1,):
        raise DataError(
            "expected %d taps for constrained shape (%d, %d), got %d"
            % (rows - cols + 1, rows, cols, taps.size)
        )
    diagonals = np.zeros(rows + cols - 1)
    diagonals[cols - 1 : rows] = taps[::-1]
    return ToeplitzParams(diagonals, rows, cols, constrained=True)


def nearest_toeplitz(F: np.ndarray, constrained: bool = False) -> ToeplitzParams:
    """Project a dense matrix onto Toeplitz structure (Frobenius-nearest).

    Each diagonal of the result is the mean of the corresponding diagonal of
    ``F``; with ``constrained=True`` diagonals outside ``[cols - rows, 0]``
    are set to zero instead of averaged.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise DataError("nearest_toeplitz expects a 2-d array")
    rows, cols = F.shape
    if constrained and cols > rows:
        raise DataError("constrained form needs rows >= cols, got (%d, %d)" % (rows, cols))
    diagonals = np.zeros(rows + cols - 1)
    lo = cols - rows if constrained else -(rows - 1)
    hi = 0 if constrained else cols - 1
    for k in range(lo, hi + 1):
        count = min(k + rows, cols - k, rows, cols)
        diagonals[k + rows - 1] = np.trace(F, offset=k) / count
    return ToeplitzParams(diagonals, rows, cols, constrained=constrained)


def constrained_product(p: ToeplitzParams, g: np.ndarray) -> np.ndarray:
    """Multiply the constrained Toeplitz matrix by ``g`` without forming it.

    Equals ``p.to_dense() @ g`` but runs as a linear convolution of the band
    taps with ``g``, whose length is exactly ``p.rows``.
    """
    if not p.constrained:
        raise DataError("constrained_product needs the constrained form")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (p.cols,):
        raise DataError("expected a length-%d vector, got shape %s" % (p.cols, g.shape))
    return np.convolve(p.resonance_taps(), g)
