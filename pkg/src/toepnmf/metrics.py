"""Reconstruction quality measures and per-direction evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

#: Relative floor applied to spectral magnitudes before taking logs.
_MAG_FLOOR = 1e-12

#: Half of the 5-degree measurement grid spacing; directions closer than
#: this to a plane count as lying on it.
PLANE_TOL_DEG = 2.5

REPORT_CSV_HEADER = "direction_index,az_deg,el_deg,rmse,sd_db,nnze"


def rmse(X: np.ndarray, Xhat: np.ndarray) -> float:
    """Root mean square error over all entries."""
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise DataError("shape mismatch %s vs %s" % (X.shape, Xhat.shape))
    return float(np.sqrt(np.mean((X - Xhat) ** 2)))


def spectral_distortion(X: np.ndarray, Xhat: np.ndarray):
    """RMS log-magnitude error in dB between paired impulse responses.

    Spectra are the unpadded full-length DFTs of the signals, so every bin
    contributes and conjugate-symmetric bins count twice.  Magnitudes are
    floored at ``1e-12`` times each spectrum's own peak so silent bins do
    not produce infinities.  For 2-d input the signals are the columns and
    the result is one value per column; for 1-d input it is a scalar.
    """
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise DataError("shape mismatch %s vs %s" % (X.shape, Xhat.shape))
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
        Xhat = Xhat[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("expected non-empty signals along the first axis")
    if np.any(np.max(np.abs(X), axis=0) == 0.0) or np.any(np.max(np.abs(Xhat), axis=0) == 0.0):
        raise DataError("spectral distortion is undefined for all-zero signals")

    mag = np.abs(np.fft.fft(X, axis=0))
    mag_hat = np.abs(np.fft.fft(Xhat, axis=0))
    mag = np.maximum(mag, _MAG_FLOOR * np.max(mag, axis=0, keepdims=True))
    mag_hat = np.maximum(mag_hat, _MAG_FLOOR * np.max(mag_hat, axis=0, keepdims=True))
    log_ratio_db = 20.0 * np.log10(mag / mag_hat)
    out = np.sqrt(np.mean(log_ratio_db**2, axis=0))
    return float(out[0]) if squeeze else out


@dataclass
class EvalReport:
    """Per-direction metrics plus their aggregates and plane subsets."""

    per_direction: list
    aggregates: dict
    plane_slices: dict


def evaluate(model, bundle) -> EvalReport:
    """Score a model against the collection it was fitted to.

    ``per_direction`` rows carry ``{direction, az_deg, el_deg, rmse, sd_db,
    nnze}``.  ``aggregates`` holds ``rmse_global`` (computed over the whole
    matrix) and the means of the per-direction distortion and non-zero
    counts.  ``plane_slices`` repeats the means over the horizontal-plane
    subset (|elevation| < 2.5 degrees) and the median-plane subset
    (|azimuth| < 2.5 degrees).
    """
    X = bundle.impulse_responses
    if model.num_taps != bundle.num_taps or model.num_directions != bundle.num_directions:
        raise DataError(
            "model is %dx%d but bundle is %dx%d"
            % (model.num_taps, model.num_directions, bundle.num_taps, bundle.num_directions)
        )
    Xhat = model.reconstruct()
    sd = spectral_distortion(X, Xhat)

    per_direction = []
    for j in range(bundle.num_directions):
        az, el = bundle.directions[j]
        per_direction.append(
            {
                "direction": j,
                "az_deg": az,
                "el_deg": el,
                "rmse": rmse(X[:, j], Xhat[:, j]),
                "sd_db": float(sd[j]),
                "nnze": model.nnze(j),
            }
        )

    aggregates = {
        "rmse_global": rmse(X, Xhat),
        "mean_sd_db": float(np.mean([row["sd_db"] for row in per_direction])),
        "mean_nnze": float(np.mean([row["nnze"] for row in per_direction])),
    }
    plane_slices = {
        "horizontal": _slice_stats(per_direction, "el_deg"),
        "median": _slice_stats(per_direction, "az_deg"),
    }
    return EvalReport(per_direction, aggregates, plane_slices)


def _slice_stats(per_direction: list, angle_key: str) -> dict:
    rows = [row for row in per_direction if abs(row[angle_key]) < PLANE_TOL_DEG]
    stats = {"indices": [row["direction"] for row in rows]}
    if rows:
        stats["mean_sd_db"] = float(np.mean([row["sd_db"] for row in rows]))
        stats["mean_nnze"] = float(np.mean([row["nnze"] for row in rows]))
    else:
        stats["mean_sd_db"] = None
        stats["mean_nnze"] = None
    return stats


def write_report_csv(report: EvalReport, path: str) -> None:
    """Emit the per-direction table with a fixed six-column header."""
    with open(path, "w") as fh:
        fh.write(REPORT_CSV_HEADER + "\n")
        for row in report.per_direction:
            fh.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%d\n"
                % (
                    row["direction"],
                    row["az_deg"],
                    row["el_deg"],
                    row["rmse"],
                    row["sd_db"],
                    row["nnze"],
                )
            )
