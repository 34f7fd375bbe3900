"""Waveform-to-feature frontend: log mel filterbank energies, ideal ratio masks,
mask application, and frame stacking of the playback reference.

All feature matrices are (frames, channels) numpy arrays. Mel power is the
squared-magnitude STFT weighted by triangular mel filters; LFBE is its log with
an additive floor so silence maps to log(LOG_FLOOR).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .validation import (
    ShapeError,
    check_features,
    check_finite,
    check_mask,
    check_nonnegative,
    check_same_shape,
)

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5   # additive floor inside the log
IRM_EPS = 1e-8     # denominator guard for the ideal ratio mask
DEFAULT_WIN_MS = 32.0
DEFAULT_HOP_MS = 10.0
DEFAULT_NUM_CHANNELS = 128
DEFAULT_FMIN = 125.0
DEFAULT_FMAX = 7500.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples nominally in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {samples.shape}")
        check_finite(samples, "waveform samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def rms(self):
        return float(np.sqrt(np.mean(np.square(self.samples)))) if len(self) else 0.0


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=float) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=float) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters as a (channels, fft_bins) nonnegative weight matrix."""

    weights: np.ndarray
    fmin: float
    fmax: float
    sample_rate: int
    n_fft: int


def _ramp_integral(lo, hi, start, end, rising):
    """Integral of a unit triangular ramp over each [lo, hi] bin interval."""
    width = end - start
    if width <= 0.0:
        return np.zeros_like(lo)
    u = np.clip(lo, start, end)
    v = np.clip(hi, start, end)
    if rising:
        return ((v - start) ** 2 - (u - start) ** 2) / (2.0 * width)
    return ((end - u) ** 2 - (end - v) ** 2) / (2.0 * width)


def mel_filterbank(
    n_channels=DEFAULT_NUM_CHANNELS,
    n_fft=512,
    sample_rate=DEFAULT_SAMPLE_RATE,
    fmin=DEFAULT_FMIN,
    fmax=DEFAULT_FMAX,
) -> MelFilterbank:
    """Build a mel filterbank whose weights are bin-averaged triangle responses.

    Averaging each triangle over the frequency span of an FFT bin (instead of
    sampling it at bin centers) guarantees every channel keeps nonzero weight
    even when triangles are narrower than the bin spacing, which happens for
    many channels packed into a small FFT.
    """
    nyquist = sample_rate / 2.0
    if not 0.0 <= fmin < fmax <= nyquist:
        raise ValueError(f"need 0 <= fmin < fmax <= {nyquist}, got [{fmin}, {fmax}]")
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_channels + 2)
    hz_pts = mel_to_hz(mel_pts)
    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    centers = np.arange(n_bins) * df
    lo = np.maximum(centers - df / 2.0, 0.0)
    hi = np.minimum(centers + df / 2.0, nyquist)
    weights = np.zeros((n_channels, n_bins))
    for i in range(n_channels):
        up = _ramp_integral(lo, hi, hz_pts[i], hz_pts[i + 1], rising=True)
        down = _ramp_integral(lo, hi, hz_pts[i + 1], hz_pts[i + 2], rising=False)
        weights[i] = (up + down) / (hi - lo)
    if not np.all(weights.sum(axis=1) > 0.0):
        raise ValueError("mel filterbank has an empty channel")
    return MelFilterbank(weights=weights, fmin=fmin, fmax=fmax,
                         sample_rate=sample_rate, n_fft=n_fft)


@lru_cache(maxsize=8)
def _cached_filterbank(n_channels, n_fft, sample_rate, fmin, fmax):
    return mel_filterbank(n_channels, n_fft, sample_rate, fmin, fmax)


def _window_hop_samples(sample_rate, win_ms, hop_ms):
    win = sample_rate * win_ms / 1000.0
    hop = sample_rate * hop_ms / 1000.0
    if abs(win - round(win)) > 1e-9 or abs(hop - round(hop)) > 1e-9:
        raise ValueError(
            f"window/hop ({win_ms} ms, {hop_ms} ms) must be an integer number "
            f"of samples at {sample_rate} Hz"
        )
    return int(round(win)), int(round(hop))


def num_frames(n_samples, win, hop):
    """Frame count of a length-n signal: 1 + floor((n - win) / hop)."""
    if n_samples < win:
        raise ShapeError(f"waveform of {n_samples} samples is shorter than one "
                         f"{win}-sample window")
    return 1 + (n_samples - win) // hop


def next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


def mel_power(
    wav: Waveform,
    win_ms=DEFAULT_WIN_MS,
    hop_ms=DEFAULT_HOP_MS,
    n_channels=DEFAULT_NUM_CHANNELS,
    fmin=DEFAULT_FMIN,
    fmax=DEFAULT_FMAX,
) -> np.ndarray:
    """Mel-weighted spectral power, shape (frames, n_channels).

    Hann-windowed frames, FFT size the next power of two at or above the
    window length, no pre-emphasis.
    """
    win, hop = _window_hop_samples(wav.sample_rate, win_ms, hop_ms)
    num_frames(len(wav), win, hop)  # raises on waveforms shorter than one window
    frames = np.lib.stride_tricks.sliding_window_view(wav.samples, win)[::hop]
    n_fft = next_pow2(win)
    window = get_window("hann", win, fftbins=True)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    fb = _cached_filterbank(n_channels, n_fft, wav.sample_rate, fmin, fmax)
    return power @ fb.weights.T


def lfbe_extract(
    wav: Waveform,
    win_ms=DEFAULT_WIN_MS,
    hop_ms=DEFAULT_HOP_MS,
    n_channels=DEFAULT_NUM_CHANNELS,
    fmin=DEFAULT_FMIN,
    fmax=DEFAULT_FMAX,
) -> np.ndarray:
    """Log mel filterbank energies: log(mel_power + LOG_FLOOR), shape (frames, channels)."""
    return np.log(mel_power(wav, win_ms, hop_ms, n_channels, fmin, fmax) + LOG_FLOOR)


def ideal_ratio_mask(clean_mel_power, noise_mel_power) -> np.ndarray:
    """Per-bin ratio of clean power to total power, S / (S + N + IRM_EPS), in [0, 1)."""
    clean = check_features(clean_mel_power, "clean mel power")
    noise = check_features(noise_mel_power, "noise mel power")
    check_same_shape(clean, noise, "clean mel power", "noise mel power")
    check_nonnegative(clean, "clean mel power")
    check_nonnegative(noise, "noise mel power")
    return clean / (clean + noise + IRM_EPS)


def apply_mask(noisy_lfbe, mask) -> np.ndarray:
    """Apply a ratio mask to LFBE features in the mel-power domain.

    The target is log(mask * (exp(noisy) - LOG_FLOOR) + LOG_FLOOR) with the
    log argument clamped at LOG_FLOOR. It is computed as
    noisy + log(mask + (1 - mask) * LOG_FLOOR * exp(-noisy)) so that an
    all-ones mask is an exact identity.
    """
    noisy = check_features(noisy_lfbe, "noisy features")
    mask = check_mask(mask)
    check_same_shape(noisy, mask, "noisy features", "mask")
    log_floor = np.log(LOG_FLOOR)
    rel_floor = LOG_FLOOR * np.exp(-np.maximum(noisy, log_floor))  # in (0, 1]
    inner = mask + (1.0 - mask) * rel_floor
    with np.errstate(divide="ignore"):
        return np.maximum(noisy + np.log(inner), log_floor)


def stack_features(noisy, playback_ref) -> np.ndarray:
    """Concatenate per-frame channels of the input and the playback reference.

    The reference is zero-padded or truncated to the input's frame count first;
    output shape is (frames, 2 * channels) with the input in channels [0, F).
    """
    noisy = check_features(noisy, "noisy features")
    ref = check_features(playback_ref, "playback reference")
    if noisy.shape[1] != ref.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {noisy.shape[1]}, reference {ref.shape[1]}"
        )
    t = noisy.shape[0]
    if ref.shape[0] < t:
        pad = np.zeros((t - ref.shape[0], ref.shape[1]))
        ref = np.concatenate([ref, pad], axis=0)
    elif ref.shape[0] > t:
        ref = ref[:t]
    return np.concatenate([noisy, ref], axis=1)


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into float samples in [-1, 1)."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ShapeError(f"{path} is not mono")
    if data.dtype != np.int16:
        raise ValueError(f"{path} is not 16-bit PCM (dtype {data.dtype})")
    return Waveform(samples=data.astype(float) / 32767.0, sample_rate=int(sample_rate))


def write_wav(path, wav: Waveform):
    """Write a waveform as 16-bit PCM mono, clipping samples to [-1, 1]."""
    clipped = np.clip(wav.samples, -1.0, 1.0)
    wavfile.write(path, wav.sample_rate, np.round(clipped * 32767.0).astype(np.int16))
