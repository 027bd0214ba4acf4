"""Hidden-field temporal kernel, temporal spectrum analysis and sampling rules."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from .grid import ExtinctionField, FieldSequence

#: Correlation time of an effectively static object (uniform weights).
INFINITE = math.inf


def parse_sigma(value) -> float:
    """Accept a number or one of ``inf``/``infinite``/``static``."""
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinite", "infinity", "static"):
        return INFINITE
    sigma = float(value)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive or INFINITE, got {value!r}")
    return sigma


def format_sigma(sigma: float) -> str:
    return "inf" if math.isinf(sigma) else repr(float(sigma))


@dataclass(frozen=True, eq=False)
class TemporalKernel:
    """Row ``t`` holds the weights ``w_t(t')`` that mix hidden fields into state ``t``."""

    times: tuple[float, ...]
    sigma: float
    weights: np.ndarray
    normalizer: np.ndarray

    @property
    def n_state(self) -> int:
        return len(self.times)

    @property
    def is_static(self) -> bool:
        return math.isinf(self.sigma)


def kernel_build(times: Sequence[float], sigma: float) -> TemporalKernel:
    times = tuple(float(t) for t in times)
    if len(times) < 1:
        raise ValueError("need at least one sample time")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be strictly increasing")
    sigma = parse_sigma(sigma)
    n = len(times)
    if math.isinf(sigma):
        raw = np.ones((n, n))
    else:
        t = np.asarray(times)
        lag = t[:, None] - t[None, :]
        raw = np.exp(-(lag ** 2) / (2.0 * sigma ** 2))
    # the diagonal term is exp(0) = 1, so every row sum is >= 1
    s = 1.0 / raw.sum(axis=1)
    weights = raw * s[:, None]
    weights.flags.writeable = False
    s.flags.writeable = False
    return TemporalKernel(times, sigma, weights, s)


def mix(kernel: TemporalKernel, hidden: np.ndarray) -> np.ndarray:
    """Apply the kernel to stacked hidden fields ``(n_state, n_voxel)``."""
    return kernel.weights @ hidden


def synthesize_state(kernel: TemporalKernel, hidden: FieldSequence, t: int) -> ExtinctionField:
    if tuple(hidden.times) != tuple(kernel.times):
        raise ValueError("hidden-field times do not match the kernel times")
    values = np.zeros(hidden.grid.shape)
    for w, state in zip(kernel.weights[t], hidden.states):
        values += w * state.values
    return ExtinctionField(hidden.grid, values)


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    frequencies: np.ndarray
    power: np.ndarray
    cutoff: float
    contained_fraction: float

    @property
    def cumulative_fraction(self) -> np.ndarray:
        """Cumulative share of the non-DC power, zero at the DC bin."""
        ac = self.power.copy()
        ac[0] = 0.0
        total = ac.sum()
        if total <= 0:
            return np.zeros_like(ac)
        return np.cumsum(ac) / total

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frequency_hz", "power", "cumulative_fraction"])
        for f, p, c in zip(self.frequencies, self.power, self.cumulative_fraction):
            writer.writerow([repr(float(f)), repr(float(p)), repr(float(c))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, self.csv_text())


def spectrum_cutoff(series, sample_period: float, window: int = 64, fraction: float = 0.95) -> SpectrumReport:
    """Aggregate short-time power spectrum of a set of time series.

    ``series`` has shape ``(n_series, n_samples)`` (a 1D array is one series).
    Each segment is Hann-windowed with 50% overlap. The segment mean is taken
    out before windowing and its power is credited to the DC bin, so the
    cutoff only measures the temporal variation.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("empty series")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if not sample_period > 0:
        raise ValueError("sample_period must be positive")
    n = x.shape[-1]
    window = int(window)
    if window < 2 or window > n:
        raise ValueError(f"window must be in [2, {n}], got {window}")
    hop = max(window // 2, 1)
    starts = range(0, n - window + 1, hop)
    win = get_window("hann", window)
    power = np.zeros(window // 2 + 1)
    for s in starts:
        seg = x[:, s:s + window]
        mean = seg.mean(axis=1, keepdims=True)
        spec = np.fft.rfft((seg - mean) * win, axis=1)
        power += (np.abs(spec) ** 2).sum(axis=0)
        power[0] += float(((mean[:, 0] * win.sum()) ** 2).sum())
    freqs = np.fft.rfftfreq(window, d=sample_period)
    ac = power[1:]
    total = ac.sum()
    # mean removal leaves rounding residue on constant series; treat it as no variation
    if total <= 1e-24 * power.sum():
        cutoff = 0.0
    else:
        cum = np.cumsum(ac)
        k = int(np.searchsorted(cum, fraction * total * (1 - 1e-12)))
        cutoff = float(freqs[1 + min(k, ac.size - 1)])
    return SpectrumReport(freqs, power, cutoff, float(fraction))


def nyquist_period(cutoff: float) -> float:
    """Longest sampling period that keeps a signal of half-bandwidth ``cutoff`` lossless."""
    if not cutoff > 0:
        raise ValueError("cutoff frequency must be positive")
    return 1.0 / (2.0 * cutoff)


def sigma_from_cutoff(cutoff: float) -> float:
    """Recommended kernel width for a half-bandwidth ``cutoff``."""
    if not cutoff > 0:
        raise ValueError("cutoff frequency must be positive")
    return 1.0 / (2.0 * cutoff)


def sampling_adequate(cutoff: float, sample_period: float) -> bool:
    if cutoff <= 0:
        return True
    return nyquist_period(cutoff) >= sample_period


def angular_rate_figure(theta: float, dt: float, sigma: float) -> float:
    """Dimensionless viewing-angle sweep per correlation time."""
    if not 0.0 <= theta <= 2 * math.pi:
        raise ValueError("theta must lie in [0, 2*pi]")
    if dt == 0:
        raise ValueError("time separation must be nonzero")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return (2.0 * theta / math.pi) * (sigma / abs(dt))
