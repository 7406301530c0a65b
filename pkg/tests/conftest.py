"""Shared synthetic fixtures for the test suite."""

import numpy as np
import pytest

from toepnmf.hrir_io import HrirBundle


def damped_responses(num_taps, num_directions, seed, delay_range=(2, 9)):
    """Impulse-response-like columns: an onset delay, then a decaying wave."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_taps, dtype=np.float64)
    X = np.zeros((num_taps, num_directions))
    for j in range(num_directions):
        delay = int(rng.integers(delay_range[0], delay_range[1]))
        env = np.exp(-t / rng.uniform(5.0, 20.0))
        wave = env * np.sin(
            2 * np.pi * rng.uniform(0.03, 0.3) * t + rng.uniform(0.0, 2 * np.pi)
        )
        X[delay:, j] = wave[: num_taps - delay]
    return X


def direction_grid(num_directions):
    """Evenly spread azimuth/elevation pairs, nothing measurement-specific."""
    az = np.linspace(-80.0, 80.0, num_directions)
    el = np.linspace(-45.0, 230.0, num_directions)
    return [(float(a), float(e)) for a, e in zip(az, el)]


def exact_model_data(num_taps, num_directions, reflection_length, seed):
    """Columns built as conv(resonance, reflection) with dense positive rows.

    Returns (X, resonance_taps, reflection_rows); every column of X is exactly
    representable by the factorization, which makes recovery measurable.
    """
    rng = np.random.default_rng(seed)
    f0 = rng.standard_normal(num_taps - reflection_length + 1)
    f0[0] += 3.0
    G0 = rng.uniform(0.1, 1.0, size=(num_directions, reflection_length))
    X = np.column_stack([np.convolve(f0, G0[j]) for j in range(num_directions)])
    return X, f0, G0


@pytest.fixture
def small_bundle():
    X = damped_responses(48, 10, seed=11)
    return HrirBundle(X, 44100.0, direction_grid(10))
