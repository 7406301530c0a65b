"""Load, save, and precondition HRIR collections and signals.

Bundle format
-------------
A collection is a directory holding ``manifest.json`` plus one raw payload
file.  The manifest looks like::

    {
      "format_version": 1,
      "sample_rate_hz": 44100,
      "num_directions": 1250,
      "num_taps": 200,
      "flags": {"minphase": true, "delay_removed": true, "normalized": true},
      "directions": [{"az_deg": -80.0, "el_deg": -45.0}, ...],
      "data_file": "hrir.f32",
      "dtype": "f32le",
      "layout": "direction_major"
    }

The payload is raw little-endian float32 with no header.  Layout is
direction-major: all ``num_taps`` samples of direction 0, then direction 1,
and so on, so the file holds exactly ``4 * num_taps * num_directions``
bytes.  In memory the collection is a ``(num_taps, num_directions)`` float64
array whose columns are the individual impulse responses.

CSV ingestion
-------------
Collections can also come from a pair of CSV files: a matrix CSV with one
row per direction (``num_directions`` rows of ``num_taps`` samples) and a
directions CSV with ``az_deg,el_deg`` per row.

Signals
-------
Single-channel signals round-trip through mono WAV (16-bit PCM or 32-bit
IEEE float, canonical RIFF layout with an fmt/data chunk scan) or headerless
little-endian float32 files.

Preprocessing
-------------
Three optional steps bring raw measurements into the shape the factorization
expects, applied in this order: minimum-phase conversion, onset-delay
removal, and per-direction normalization to unit absolute sum.  Each sets
the matching manifest flag.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericalError

FORMAT_VERSION = 1
DEFAULT_DATA_FILE = "hrir.f32"
DEFAULT_ONSET_FRACTION = 0.1

#: Normalized columns stored as float32 only hold their unit absolute sum to
#: about one part in 2**23, so round-tripped bundles are validated against
#: this instead of the in-memory tolerance.
_F32_NORM_ATOL = 8 * float(np.finfo(np.float32).eps)


def as_direction_pair(d) -> tuple:
    """Coerce a direction entry to a plain ``(az_deg, el_deg)`` tuple.

    Accepts either the manifest's ``{"az_deg": ..., "el_deg": ...}`` form or
    any two-element sequence.
    """
    if isinstance(d, dict):
        try:
            return (float(d["az_deg"]), float(d["el_deg"]))
        except KeyError as exc:
            raise DataError("direction entry is missing key %s" % exc) from None
    pair = tuple(d)
    if len(pair) != 2:
        raise DataError("direction entries must be (az_deg, el_deg) pairs")
    return (float(pair[0]), float(pair[1]))


@dataclass
class HrirBundle:
    """An HRIR collection plus the metadata needed to interpret it."""

    impulse_responses: np.ndarray
    sample_rate_hz: float
    directions: list = field(default_factory=list)
    minphase: bool = False
    delay_removed: bool = False
    normalized: bool = False

    def __post_init__(self):
        self.impulse_responses = np.asarray(self.impulse_responses, dtype=np.float64)
        if self.impulse_responses.ndim != 2:
            raise DataError("impulse responses must be a (num_taps, num_directions) array")
        if 0 in self.impulse_responses.shape:
            raise DataError("collection must have at least one tap and one direction")
        if not np.all(np.isfinite(self.impulse_responses)):
            raise DataError("impulse responses contain non-finite samples")
        if self.sample_rate_hz <= 0:
            raise DataError("sample rate must be positive")
        if len(self.directions) != self.impulse_responses.shape[1]:
            raise DataError(
                "have %d direction entries for %d directions"
                % (len(self.directions), self.impulse_responses.shape[1])
            )
        self.directions = [as_direction_pair(d) for d in self.directions]

    @property
    def num_taps(self) -> int:
        return self.impulse_responses.shape[0]

    @property
    def num_directions(self) -> int:
        return self.impulse_responses.shape[1]

    def validate(self, norm_atol: float = 1e-9,
                 onset_fraction: float = DEFAULT_ONSET_FRACTION) -> None:
        """Check that the stored flags hold for the stored samples."""
        X = self.impulse_responses
        if self.normalized:
            sums = np.sum(np.abs(X), axis=0)
            worst = float(np.max(np.abs(sums - 1.0)))
            if worst > norm_atol:
                raise DataError(
                    "bundle is flagged normalized but a column absolute sum is off by %.3g"
                    % worst
                )
        if self.delay_removed:
            peaks = np.max(np.abs(X), axis=0)
            # Slack covers float32 round-tripping of the stored samples.
            ok = np.abs(X[0, :]) >= onset_fraction * peaks * (1.0 - 1e-6)
            if not np.all(ok):
                raise DataError(
                    "bundle is flagged delay-removed but direction %d still has a "
                    "below-threshold first tap" % int(np.flatnonzero(~ok)[0])
                )


def save_bundle(bundle: HrirBundle, path: str, data_file: str = DEFAULT_DATA_FILE) -> None:
    """Write ``manifest.json`` plus the float32 payload under ``path``."""
    bundle.validate(norm_atol=max(1e-9, _F32_NORM_ATOL))
    os.makedirs(path, exist_ok=True)
    rate = bundle.sample_rate_hz
    manifest = {
        "format_version": FORMAT_VERSION,
        "sample_rate_hz": int(rate) if float(rate).is_integer() else float(rate),
        "num_directions": bundle.num_directions,
        "num_taps": bundle.num_taps,
        "flags": {
            "minphase": bundle.minphase,
            "delay_removed": bundle.delay_removed,
            "normalized": bundle.normalized,
        },
        "directions": [
            {"az_deg": az, "el_deg": el} for az, el in bundle.directions
        ],
        "data_file": data_file,
        "dtype": "f32le",
        "layout": "direction_major",
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    # Direction-major payload: the transpose is C-contiguous per direction.
    payload = np.ascontiguousarray(bundle.impulse_responses.T, dtype="<f4")
    payload.tofile(os.path.join(path, data_file))


def load_bundle(path: str) -> HrirBundle:
    """Read a bundle directory back into memory, verifying the manifest."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError("no manifest.json under %s" % path) from None
    except json.JSONDecodeError as exc:
        raise DataError("manifest.json is not valid JSON: %s" % exc) from None

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError("unsupported format_version %r" % (version,))
    if manifest.get("dtype") != "f32le":
        raise DataError("unsupported dtype %r" % (manifest.get("dtype"),))
    if manifest.get("layout") != "direction_major":
        raise DataError("unsupported layout %r" % (manifest.get("layout"),))

    num_taps = int(manifest["num_taps"])
    num_directions = int(manifest["num_directions"])
    if num_taps < 1 or num_directions < 1:
        raise DataError("manifest promises a degenerate %dx%d collection"
                        % (num_taps, num_directions))
    data_path = os.path.join(path, manifest["data_file"])
    try:
        raw = np.fromfile(data_path, dtype="<f4")
    except FileNotFoundError:
        raise DataError("payload file %s is missing" % data_path) from None
    if raw.size != num_taps * num_directions:
        raise DataError(
            "payload holds %d samples, manifest promises %d x %d"
            % (raw.size, num_taps, num_directions)
        )

    flags = manifest.get("flags", {})
    bundle = HrirBundle(
        impulse_responses=raw.reshape(num_directions, num_taps).T.astype(np.float64),
        sample_rate_hz=float(manifest["sample_rate_hz"]),
        directions=list(manifest["directions"]),
        minphase=bool(flags.get("minphase", False)),
        delay_removed=bool(flags.get("delay_removed", False)),
        normalized=bool(flags.get("normalized", False)),
    )
    bundle.validate(norm_atol=max(1e-9, _F32_NORM_ATOL))
    return bundle


def load_csv(matrix_path: str, directions_path: str, sample_rate_hz: float) -> HrirBundle:
    """Build an unprocessed bundle from a matrix CSV and a directions CSV.

    The matrix CSV has one row per direction; the directions CSV has
    matching ``az_deg,el_deg`` rows.  A single non-numeric header line in
    either file is tolerated and skipped.
    """
    rows = _read_csv_matrix(matrix_path)
    dirs = _read_csv_matrix(directions_path)
    if dirs.ndim != 2 or dirs.shape[1] != 2:
        raise DataError("directions CSV must have exactly two columns (az_deg, el_deg)")
    if rows.shape[0] != dirs.shape[0]:
        raise DataError(
            "matrix CSV has %d rows but directions CSV has %d"
            % (rows.shape[0], dirs.shape[0])
        )
    return HrirBundle(
        impulse_responses=rows.T,
        sample_rate_hz=sample_rate_hz,
        directions=[(float(a), float(e)) for a, e in dirs],
    )


def _read_csv_matrix(path: str) -> np.ndarray:
    try:
        try:
            data = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError:
            data = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    except FileNotFoundError:
        raise DataError("no such file: %s" % path) from None
    except ValueError as exc:
        raise DataError("could not parse %s as numeric CSV: %s" % (path, exc)) from None
    return data


@dataclass
class Signal:
    """A single-channel signal with its sample rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("signals are single-channel 1-d arrays")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("signal contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise DataError("sample rate must be positive")


def read_signal(path: str, sample_rate_hz: float | None = None) -> Signal:
    """Read a mono WAV (by extension) or a headerless float32 file.

    Headerless files carry no rate, so ``sample_rate_hz`` is required for
    them and ignored for WAV.
    """
    if path.lower().endswith(".wav"):
        return _read_wav(path)
    if sample_rate_hz is None:
        raise DataError("headerless signal files need an explicit sample rate")
    try:
        samples = np.fromfile(path, dtype="<f4").astype(np.float64)
    except FileNotFoundError:
        raise DataError("no such file: %s" % path) from None
    return Signal(samples=samples, sample_rate_hz=sample_rate_hz)


def write_signal(signal: Signal, path: str) -> None:
    """Write a mono float32 WAV (by extension) or headerless float32 file."""
    if path.lower().endswith(".wav"):
        _write_wav_float32(signal, path)
    else:
        np.asarray(signal.samples, dtype="<f4").tofile(path)


def _read_wav(path: str) -> Signal:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DataError("no such file: %s" % path) from None
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise DataError("%s is not a RIFF/WAVE file" % path)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        # Chunks are word-aligned: odd sizes carry one pad byte.
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise DataError("%s is missing its fmt or data chunk" % path)
    audio_format, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise DataError("only mono WAV is supported, got %d channels" % channels)
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise DataError(
            "unsupported WAV encoding (format %d, %d bits); use PCM16 or float32"
            % (audio_format, bits)
        )
    return Signal(samples=samples, sample_rate_hz=float(rate))


def _write_wav_float32(signal: Signal, path: str) -> None:
    payload = np.asarray(signal.samples, dtype="<f4").tobytes()
    rate = int(round(signal.sample_rate_hz))
    header = b"".join(
        [
            b"RIFF",
            struct.pack("<I", 4 + (8 + 16) + (8 + 4) + (8 + len(payload))),
            b"WAVE",
            b"fmt ",
            struct.pack("<IHHIIHH", 16, 3, 1, rate, rate * 4, 4, 32),
            b"fact",
            struct.pack("<II", 4, signal.samples.size),
            b"data",
            struct.pack("<I", len(payload)),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def onset_index(h: np.ndarray, threshold_fraction: float = DEFAULT_ONSET_FRACTION) -> int:
    """First sample whose magnitude reaches ``threshold_fraction`` of the peak."""
    if not 0.0 < threshold_fraction < 1.0:
        raise DataError("threshold fraction must be in (0, 1)")
    h = np.asarray(h, dtype=np.float64)
    peak = np.max(np.abs(h))
    if peak == 0.0:
        raise DataError("cannot locate an onset in an all-zero response")
    return int(np.flatnonzero(np.abs(h) >= threshold_fraction * peak)[0])


def remove_onset_delay(h: np.ndarray,
                       threshold_fraction: float = DEFAULT_ONSET_FRACTION) -> np.ndarray:
    """Left-shift so the onset lands on sample 0, zero-padding the tail.

    Accepts a single response or a matrix of per-column responses; each
    column is shifted by its own onset.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        k = onset_index(h, threshold_fraction)
        out = np.zeros_like(h)
        out[: h.size - k] = h[k:]
        return out
    out = np.zeros_like(h)
    num_taps = h.shape[0]
    for i in range(h.shape[1]):
        k = onset_index(h[:, i], threshold_fraction)
        out[: num_taps - k, i] = h[k:, i]
    return out


def normalize_abs_sum(h: np.ndarray) -> np.ndarray:
    """Scale so the absolute sample sum is one (per column for matrices)."""
    h = np.asarray(h, dtype=np.float64)
    sums = np.sum(np.abs(h), axis=0)
    if np.any(sums == 0.0):
        raise DataError("cannot normalize an all-zero response")
    return h / sums


def to_min_phase(h: np.ndarray, tol: float = 1e-6, max_fft_len: int = 1 << 22) -> np.ndarray:
    """Return the minimum-phase response with the same magnitude spectrum.

    Uses the real-cepstrum construction: fold the anticausal cepstrum onto
    the causal side and exponentiate.  Cepstral aliasing on a too-short FFT
    grid silently distorts the magnitude, so the FFT length starts at four
    times the filter length and doubles until the magnitude response matches
    the input within ``tol`` (relative, checked on a grid twice as dense as
    the one used for the construction).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise DataError("minimum-phase conversion expects a non-empty 1-d signal")
    if np.max(np.abs(h)) == 0.0:
        raise DataError("cannot convert an all-zero response to minimum phase")
    n = _next_pow2(4 * h.size)
    while True:
        out = _min_phase_on_grid(h, n)[: h.size]
        err = _magnitude_mismatch(h, out, _next_pow2(2 * n))
        if err <= tol:
            return out
        if n >= max_fft_len:
            raise NumericalError(
                "minimum-phase conversion stuck at relative magnitude error %.3g "
                "(tolerance %.3g) with FFT length %d" % (err, tol, n)
            )
        n *= 2


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _min_phase_on_grid(x: np.ndarray, n: int) -> np.ndarray:
    mag = np.abs(np.fft.fft(x, n))
    # Spectral zeros would send the log to -inf; the floor perturbs the
    # result slightly and the caller's magnitude check catches any damage.
    cepstrum = np.fft.ifft(np.log(np.maximum(mag, mag.max() * 1e-12))).real
    fold = np.zeros(n)
    fold[0] = 1.0
    fold[1 : n // 2] = 2.0
    fold[n // 2] = 1.0
    return np.fft.ifft(np.exp(np.fft.fft(cepstrum * fold))).real


def _magnitude_mismatch(x: np.ndarray, y: np.ndarray, n: int) -> float:
    ref = np.abs(np.fft.rfft(x, n))
    got = np.abs(np.fft.rfft(y, n))
    return float(np.max(np.abs(ref - got)) / np.max(ref))


def preprocess(
    bundle: HrirBundle,
    min_phase: bool = True,
    remove_delay: bool = True,
    normalize: bool = True,
    onset_fraction: float = DEFAULT_ONSET_FRACTION,
    min_phase_tol: float = 1e-6,
) -> HrirBundle:
    """Apply the standard conditioning pipeline and update the bundle flags.

    Steps run in a fixed order: minimum-phase conversion, then onset-delay
    removal, then normalization to unit absolute sum.  Steps whose flag the
    bundle already carries are skipped, which makes the pipeline exactly
    idempotent (re-running the min-phase construction on its own output
    would otherwise drift by up to the magnitude tolerance).  Disabled
    steps leave their flag untouched.
    """
    X = bundle.impulse_responses
    if min_phase and not bundle.minphase:
        X = np.column_stack(
            [to_min_phase(X[:, i], tol=min_phase_tol) for i in range(X.shape[1])]
        )
    if remove_delay and not bundle.delay_removed:
        X = remove_onset_delay(X, threshold_fraction=onset_fraction)
    if normalize and not bundle.normalized:
        X = normalize_abs_sum(X)
    return replace(
        bundle,
        impulse_responses=X,
        minphase=bundle.minphase or min_phase,
        delay_removed=bundle.delay_removed or remove_delay,
        normalized=bundle.normalized or normalize,
    )
