"""Real-input FFT plumbing and the frequency-mask disentangler.

A window of ``T`` rows is split into a time-invariant part (the inverse
transform of its dominant frequency bins) and a time-variant remainder.
Which bins count as dominant is decided once per dataset, from amplitude
statistics accumulated over all training lookback windows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def rfft(signal: Sequence[float] | np.ndarray) -> np.ndarray:
    """One-sided DFT of a real signal of length T >= 2; returns floor(T/2)+1 bins."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"rfft expects a 1-D signal, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"rfft needs at least 2 samples, got {x.shape[0]}")
    return np.fft.rfft(x)


def inverse_rfft(spectrum: np.ndarray, length: int) -> np.ndarray:
    """Inverse of :func:`rfft`; ``length`` resolves the even/odd ambiguity."""
    spec = np.asarray(spectrum, dtype=np.complex128)
    if spec.ndim != 1:
        raise ValueError(f"inverse_rfft expects a 1-D spectrum, got shape {spec.shape}")
    expected = length // 2 + 1
    if spec.shape[0] != expected:
        raise ValueError(
            f"spectrum has {spec.shape[0]} bins but length {length} requires {expected}"
        )
    return np.fft.irfft(spec, n=length)


def spectrum_bins(window_length: int) -> int:
    return window_length // 2 + 1


@dataclass(frozen=True)
class AmplitudeStats:
    """Mean one-sided FFT magnitude per frequency bin over training windows.

    Magnitudes are averaged over every window and every variate, giving one
    shared statistic per dataset.
    """

    window_length: int
    mean_amplitude: np.ndarray
    window_count: int

    def merge(self, other: "AmplitudeStats") -> "AmplitudeStats":
        """Combine partial accumulations (associative up to float reassociation)."""
        if self.window_length != other.window_length:
            raise ValueError(
                f"cannot merge stats for T={self.window_length} with T={other.window_length}"
            )
        total = self.window_count + other.window_count
        mean = (
            self.mean_amplitude * self.window_count + other.mean_amplitude * other.window_count
        ) / total
        return AmplitudeStats(self.window_length, mean, total)


def accumulate_amplitudes(training_windows: Iterable[np.ndarray]) -> AmplitudeStats:
    """Average per-bin FFT magnitude over an iterator of (T, C) windows."""
    total = None
    count = 0
    window_length = None
    for window in training_windows:
        w = np.asarray(window, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"windows must be 2-D (T, C), got shape {w.shape}")
        if window_length is None:
            window_length = w.shape[0]
            if window_length < 2:
                raise ValueError(f"window length must be >= 2, got {window_length}")
            total = np.zeros(spectrum_bins(window_length))
        elif w.shape[0] != window_length:
            raise ValueError(f"inconsistent window length: {w.shape[0]} != {window_length}")
        total += np.abs(np.fft.rfft(w, axis=0)).mean(axis=1)
        count += 1
    if count == 0:
        raise ValueError("accumulate_amplitudes requires at least one window")
    return AmplitudeStats(window_length=window_length, mean_amplitude=total / count, window_count=count)


@dataclass(frozen=True)
class SpectrumMask:
    """The retained frequency-index subset for a window length T.

    ``kept`` holds max(1, round(alpha * (floor(T/2)+1))) indices, rounding
    half up; during selection, amplitude ties break toward the lower index.
    """

    window_length: int
    kept: tuple[int, ...]
    alpha: float

    def __post_init__(self):
        bins = spectrum_bins(self.window_length)
        if len(set(self.kept)) != len(self.kept):
            raise ValueError("kept indices must be unique")
        if any(k < 0 or k >= bins for k in self.kept):
            raise ValueError(f"kept indices must lie in [0, {bins - 1}]")
        if tuple(sorted(self.kept)) != tuple(self.kept):
            raise ValueError("kept indices must be sorted")
        if len(self.kept) != kept_count(self.window_length, self.alpha):
            raise ValueError(
                f"{len(self.kept)} kept indices inconsistent with alpha={self.alpha} at T={self.window_length}"
            )

    @property
    def bins(self) -> np.ndarray:
        """Boolean pass-band, length floor(T/2)+1."""
        out = np.zeros(spectrum_bins(self.window_length), dtype=bool)
        out[list(self.kept)] = True
        return out


def kept_count(window_length: int, alpha: float) -> int:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    bins = spectrum_bins(window_length)
    return max(1, int(np.floor(alpha * bins + 0.5)))


def build_mask(stats: AmplitudeStats, alpha: float) -> SpectrumMask:
    """Keep the top-amplitude bins; ties resolved toward lower frequencies."""
    k = kept_count(stats.window_length, alpha)
    order = sorted(range(stats.mean_amplitude.shape[0]), key=lambda i: (-stats.mean_amplitude[i], i))
    return SpectrumMask(window_length=stats.window_length, kept=tuple(sorted(order[:k])), alpha=alpha)


def fourier_filter(x: np.ndarray, mask: SpectrumMask) -> tuple[np.ndarray, np.ndarray]:
    """Split windows into (invariant, variant) parts along the time axis.

    ``x`` is (T, C) or any (..., T, C) stack. The invariant part keeps only
    the mask's bins; the variant part is the exact remainder x - x_inv, so the
    two always add back to the input bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"expected (..., T, C) input, got shape {x.shape}")
    t = x.shape[-2]
    if t != mask.window_length:
        raise ValueError(f"window has {t} rows but mask was built for T={mask.window_length}")
    spec = np.fft.rfft(x, axis=-2)
    spec[..., ~mask.bins, :] = 0.0
    x_inv = np.fft.irfft(spec, n=t, axis=-2)
    return x_inv, x - x_inv
