"""Sparse, dense, and FFT overlap-save convolution with switchable kernels.

Three modes compute the same full linear convolution:

* ``sparse_direct`` pays one multiply-accumulate per signal sample per
  non-zero tap, which is the whole point of sparse reflection filters;
* ``dense_direct`` is the classic time-domain loop over every tap;
* ``fft_overlap_save`` partitions the signal into power-of-two blocks,
  multiplies spectra from a self-contained radix-2 transform, and keeps
  each block's valid region.

The hot loops live in a compiled extension (built from
``_kernels.pyx``); a NumPy implementation with the same interface is the
fallback.  The default is chosen once at import time (set
``TOEPNMF_FORCE_PY=1`` to insist on the fallback) and every entry point
also takes an explicit ``backend`` argument.  Plans and renderers carry
internal counters and caches, so share them across threads only behind a
lock; the arrays they return are fresh and safe to share.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import DataError
from ..sparsify import SparseFilter
from . import _kernels_py

_compiled = None
if os.environ.get("TOEPNMF_FORCE_PY", "") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

DEFAULT_BACKEND = "compiled" if _compiled is not None else "python"

MODES = ("sparse_direct", "dense_direct", "fft_overlap_save")

#: Complex flops per output sample of whole-signal FFT convolution,
#: the (68/9)(n log2 n + n) operation count spread over the valid samples.
FFT_COST_FACTOR = 68.0 / 9.0

BENCH_CSV_HEADER = "mode,signal_len,nnze,block_size,ns_per_sample_median,flops_model"


def available_backends() -> tuple:
    return ("compiled", "python") if _compiled is not None else ("python",)


def _backend_module(name: str | None):
    if name is None:
        name = DEFAULT_BACKEND
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise DataError("compiled kernels are not available in this install")
        return _compiled
    raise DataError("unknown backend %r" % (name,))


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@lru_cache(maxsize=64)
def _fft_tables(n: int):
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
    twiddles = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    return rev, twiddles


def radix2_fft(values, inverse: bool = False, backend: str | None = None) -> np.ndarray:
    """Power-of-two discrete Fourier transform via the selected kernel."""
    arr = np.ascontiguousarray(values, dtype=np.complex128)
    n = arr.size
    if n == 0 or n & (n - 1):
        raise DataError("transform length must be a power of two, got %d" % n)
    rev, twiddles = _fft_tables(n)
    out, _ = _backend_module(backend).fft(arr, rev, twiddles, bool(inverse))
    return out


class ConvPlan:
    """A reusable convolution configuration with an operation counter.

    ``taps`` may be a dense 1-d array or a
    :class:`~toepnmf.sparsify.SparseFilter`; either representation is
    derived on demand, so any mode works with any taps.  ``macs``
    accumulates the multiply-accumulate count over every ``convolve`` call
    through this plan.
    """

    def __init__(self, taps, mode: str, block_size: int | None = None,
                 backend: str | None = None):
        if mode not in MODES:
            raise DataError("unknown convolution mode %r" % (mode,))
        self.mode = mode
        self.backend = DEFAULT_BACKEND if backend is None else backend
        _backend_module(self.backend)
        self.macs = 0

        if isinstance(taps, SparseFilter):
            self._indices = np.ascontiguousarray(taps.indices, dtype=np.int64)
            self._values = np.ascontiguousarray(taps.values, dtype=np.float64)
            self._dense = None
            self.taps_length = taps.length
        else:
            dense = np.ascontiguousarray(taps, dtype=np.float64)
            if dense.ndim != 1 or dense.size == 0:
                raise DataError("taps must be a non-empty 1-d array")
            if not np.all(np.isfinite(dense)):
                raise DataError("taps contain non-finite values")
            self._dense = dense
            self._indices = None
            self._values = None
            self.taps_length = dense.size

        self._taps_spectrum = None
        if mode == "fft_overlap_save":
            if block_size is not None and block_size < self.taps_length:
                raise DataError(
                    "block size %d is smaller than the %d-tap filter"
                    % (block_size, self.taps_length)
                )
            wanted = 4 * self.taps_length if block_size is None else block_size
            self.block_size = _next_pow2(max(wanted, 2))
        else:
            self.block_size = None

    def dense_taps(self) -> np.ndarray:
        if self._dense is None:
            dense = np.zeros(self.taps_length)
            dense[self._indices] = self._values
            self._dense = dense
        return self._dense

    def sparse_parts(self):
        if self._indices is None:
            self._indices = np.flatnonzero(self._dense).astype(np.int64)
            self._values = np.ascontiguousarray(self._dense[self._indices])
        return self._indices, self._values, self.taps_length


def convolve(plan: ConvPlan, y) -> np.ndarray:
    """Full linear convolution of ``y`` with the planned taps.

    The output always has ``len(y) + plan.taps_length - 1`` samples, and
    all three modes agree to near machine precision.
    """
    arr = np.ascontiguousarray(getattr(y, "samples", y), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("signal must be a non-empty 1-d array")
    if not np.all(np.isfinite(arr)):
        raise DataError("signal contains non-finite samples")
    kernels = _backend_module(plan.backend)
    if plan.mode == "dense_direct":
        out, macs = kernels.conv_dense(arr, plan.dense_taps())
    elif plan.mode == "sparse_direct":
        indices, values, length = plan.sparse_parts()
        out, macs = kernels.conv_sparse(arr, indices, values, length)
    else:
        out, macs = _overlap_save(plan, arr, kernels)
    plan.macs += int(macs)
    return out


def _overlap_save(plan: ConvPlan, y: np.ndarray, kernels) -> np.ndarray:
    n = plan.block_size
    ntaps = plan.taps_length
    rev, twiddles = _fft_tables(n)
    macs = 0
    if plan._taps_spectrum is None:
        padded_taps = np.zeros(n, dtype=np.complex128)
        padded_taps[:ntaps] = plan.dense_taps()
        plan._taps_spectrum, setup_macs = kernels.fft(padded_taps, rev, twiddles, False)
        macs += setup_macs
    spectrum = plan._taps_spectrum

    valid = n - ntaps + 1
    out_len = y.size + ntaps - 1
    stream = np.zeros(out_len - 1 + n)
    stream[ntaps - 1 : ntaps - 1 + y.size] = y
    out = np.empty(out_len)
    pos = 0
    while pos < out_len:
        segment = stream[pos : pos + n].astype(np.complex128)
        seg_spec, fwd_macs = kernels.fft(segment, rev, twiddles, False)
        product = seg_spec * spectrum
        back, inv_macs = kernels.fft(product, rev, twiddles, True)
        macs += fwd_macs + inv_macs + n
        take = min(valid, out_len - pos)
        out[pos : pos + take] = back.real[ntaps - 1 : ntaps - 1 + take]
        pos += valid
    return out, macs


class Renderer:
    """Two-stage rendering of signals through a factorized model.

    The resonance filter is direction-independent, so its convolution with
    a given signal object is computed once and reused across every
    direction rendered from that same object; ``counters`` exposes the
    accumulated per-stage work and the cache behavior.  ``mode`` selects
    the reflection-stage convolution; the resonance stage uses the same
    mode except that ``sparse_direct`` falls back to ``dense_direct``
    there, the resonance filter being dense by nature.
    """

    def __init__(self, model, mode: str = "sparse_direct",
                 block_size: int | None = None, backend: str | None = None):
        if mode not in MODES:
            raise DataError("unknown convolution mode %r" % (mode,))
        self.model = model
        resonance_mode = "dense_direct" if mode == "sparse_direct" else mode
        self.resonance_plan = ConvPlan(
            model.resonance_taps, resonance_mode, block_size, backend
        )
        self._mode = mode
        self._block_size = block_size
        self._backend = backend
        self._reflection_plans = {}
        self._cached_signal = None
        self._cached_filtered = None
        self.cache_hits = 0
        self.cache_misses = 0

    def render(self, y, direction: int) -> np.ndarray:
        """Convolve ``y`` with the model's response for one direction."""
        if not 0 <= direction < self.model.num_directions:
            raise DataError("direction %d out of range" % direction)
        key = getattr(y, "samples", y)
        if key is self._cached_signal:
            filtered = self._cached_filtered
            self.cache_hits += 1
        else:
            filtered = convolve(self.resonance_plan, key)
            self._cached_signal = key
            self._cached_filtered = filtered
            self.cache_misses += 1

        plan = self._reflection_plans.get(direction)
        if plan is None:
            if self.model.is_sparse:
                taps = self.model.reflections[direction]
            else:
                taps = self.model.reflection(direction)
            plan = ConvPlan(taps, self._mode, self._block_size, self._backend)
            self._reflection_plans[direction] = plan
        return convolve(plan, filtered)

    @property
    def counters(self) -> dict:
        return {
            "resonance_macs": self.resonance_plan.macs,
            "reflection_macs": sum(p.macs for p in self._reflection_plans.values()),
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
        }


def render(model, y, direction: int, mode: str = "sparse_direct",
           block_size: int | None = None, backend: str | None = None) -> np.ndarray:
    """One-shot render; use :class:`Renderer` to amortize across directions."""
    return Renderer(model, mode, block_size, backend).render(y, direction)


def cost_per_sample_time_domain(taps_nnze: int, signal_len: int) -> float:
    """Real flops per sample of direct convolution: min of the two lengths."""
    _check_cost_args(taps_nnze, signal_len)
    return float(min(taps_nnze, signal_len))


def cost_per_sample_fft(taps_nnze: int, signal_len: int) -> float:
    """Complex flops per valid output sample of whole-signal FFT convolution."""
    _check_cost_args(taps_nnze, signal_len)
    if signal_len < taps_nnze:
        raise DataError("FFT cost model needs signal_len >= taps_nnze")
    n = float(signal_len)
    return FFT_COST_FACTOR * (n * math.log2(n) + n) / (signal_len - taps_nnze + 1)


def cost_per_sample_fft_real_adjusted(taps_nnze: int, signal_len: int) -> float:
    """FFT cost restated in real flops, at three real multiply-adds per complex."""
    return 3.0 * cost_per_sample_fft(taps_nnze, signal_len)


def _check_cost_args(taps_nnze: int, signal_len: int) -> None:
    if taps_nnze < 1 or signal_len < 1:
        raise DataError("cost model needs positive lengths")


def time_domain_crossover(signal_len: int) -> int:
    """Largest filter size still cheaper in the time domain at this signal length.

    Scans filter sizes upward and stops at the first one whose raw
    time-domain cost reaches the raw FFT cost, returning the size just
    below it.
    """
    for nnze in range(1, signal_len + 1):
        if cost_per_sample_time_domain(nnze, signal_len) >= cost_per_sample_fft(nnze, signal_len):
            return nnze - 1
    return signal_len


@dataclass
class BenchRow:
    mode: str
    signal_len: int
    nnze: int
    block_size: int
    ns_per_sample_median: float
    flops_model: float
    backend: str


def bench(signal_len: int, taps_nnze_list, repeats: int = 5,
          block_size: int | None = None, backends=None, seed: int = 0) -> list:
    """Time every mode on random filters of the given non-zero counts.

    Filters are drawn fully dense at each requested size so the three modes
    chew on identical taps and ``nnze`` equals the filter length.  Each
    (mode, size) cell reports the median over ``repeats`` runs in
    nanoseconds per output sample next to its cost-model value (the raw
    formula numbers; NaN where the FFT model's precondition fails).
    """
    if repeats < 3:
        raise DataError("need at least 3 repeats for a stable median")
    if signal_len < 1:
        raise DataError("signal length must be positive")
    sizes = list(taps_nnze_list)
    if not sizes or any(s < 1 for s in sizes):
        raise DataError("taps_nnze_list must be non-empty positive integers")
    chosen = list(backends) if backends else [DEFAULT_BACKEND]

    rng = np.random.default_rng(seed)
    y = rng.standard_normal(signal_len)
    rows = []
    for nnze in sizes:
        taps = rng.uniform(0.5, 1.5, size=nnze)
        for backend in chosen:
            for mode in MODES:
                plan = ConvPlan(taps, mode, block_size, backend)
                times = []
                out_size = signal_len + nnze - 1
                for _ in range(repeats):
                    start = time.perf_counter_ns()
                    convolve(plan, y)
                    times.append(time.perf_counter_ns() - start)
                if mode == "fft_overlap_save":
                    flops = (cost_per_sample_fft(nnze, signal_len)
                             if signal_len >= nnze else float("nan"))
                    block = plan.block_size
                else:
                    flops = cost_per_sample_time_domain(nnze, signal_len)
                    block = 0
                rows.append(BenchRow(
                    mode=mode,
                    signal_len=signal_len,
                    nnze=nnze,
                    block_size=block,
                    ns_per_sample_median=float(np.median(times)) / out_size,
                    flops_model=flops,
                    backend=backend,
                ))
    return rows


def write_bench_csv(rows, path: str, include_backend: bool = False) -> None:
    """Emit bench rows under the fixed header (plus ``backend`` on request)."""
    header = BENCH_CSV_HEADER + (",backend" if include_backend else "")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            line = "%s,%d,%d,%d,%.17g,%.17g" % (
                row.mode,
                row.signal_len,
                row.nnze,
                row.block_size,
                row.ns_per_sample_median,
                row.flops_model,
            )
            if include_backend:
                line += ",%s" % row.backend
            fh.write(line + "\n")
