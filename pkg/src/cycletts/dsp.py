"""Spectrogram analysis and Griffin-Lim waveform synthesis.

All functions here are pure and deterministic. Waveforms are mono float
arrays in [-1, 1]; spectrograms are non-negative (frames, bins) matrices,
either linear-magnitude STFT bins or mel-filterbank projections.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    hop_length: int = 200
    window_length: int = 800
    mel_bins: int = 40
    griffin_lim_iters: int = 60
    mel_fmin: float = 40.0
    mel_fmax: float = 7600.0

    def __post_init__(self):
        if min(self.sample_rate, self.fft_size, self.hop_length,
               self.window_length, self.mel_bins, self.griffin_lim_iters) <= 0:
            raise ValueError("all DspConfig sizes must be positive")
        if not (self.hop_length <= self.window_length <= self.fft_size):
            raise ValueError(
                f"need hop <= window <= fft, got hop={self.hop_length} "
                f"window={self.window_length} fft={self.fft_size}")
        if not (0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2):
            raise ValueError("mel band must satisfy 0 <= fmin < fmax <= Nyquist")

    @property
    def frame_shift(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def n_linear_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class Spectrogram:
    """Non-negative (frames, bins) matrix plus its timing and bin semantics."""

    values: np.ndarray
    frame_shift: float
    bin_kind: str  # "linear" (magnitude STFT) or "mel"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"spectrogram must be 2-d with >= 1 frame, got shape {self.values.shape}")
        if self.bin_kind not in ("linear", "mel"):
            raise ValueError(f"unknown bin_kind {self.bin_kind!r}")
        if np.any(self.values < 0):
            raise ValueError("spectrogram entries must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(sample_rate: int, fft_size: int, mel_bins: int,
                    fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, shape (mel_bins, fft_size // 2 + 1)."""
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    lower = hz_pts[:-2][:, None]
    center = hz_pts[1:-1][:, None]
    upper = hz_pts[2:][:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_filterbank(config: DspConfig) -> np.ndarray:
    return _mel_filterbank(config.sample_rate, config.fft_size, config.mel_bins,
                           config.mel_fmin, config.mel_fmax)


@lru_cache(maxsize=8)
def _mel_pinv(sample_rate: int, fft_size: int, mel_bins: int,
              fmin: float, fmax: float) -> np.ndarray:
    fb = _mel_filterbank(sample_rate, fft_size, mel_bins, fmin, fmax)
    return np.linalg.pinv(fb)


def _window(config: DspConfig) -> np.ndarray:
    # Periodic Hann; satisfies the overlap-add constraint for hop <= window / 2.
    n = config.window_length
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples: int, config: DspConfig) -> int:
    """Frame count produced by `analyze` for a signal of `n_samples` samples.

    The signal is reflect-padded by window_length // 2 on each side so frame
    timing is centered, then frames advance by hop_length while a full
    window fits.
    """
    padded = n_samples + 2 * (config.window_length // 2)
    return (padded - config.window_length) // config.hop_length + 1


def _stft_magnitude(padded: np.ndarray, config: DspConfig) -> np.ndarray:
    return np.abs(_stft(padded, config))


def _stft(padded: np.ndarray, config: DspConfig) -> np.ndarray:
    """STFT of an already-padded signal: (frames, fft_size // 2 + 1) complex."""
    win, hop, n_fft = config.window_length, config.hop_length, config.fft_size
    n_frames = (padded.shape[0] - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * _window(config)[None, :]
    return np.fft.rfft(frames, n=n_fft, axis=1)


def _istft(spec: np.ndarray, config: DspConfig) -> np.ndarray:
    """Least-squares overlap-add inverse of `_stft` (padded-domain signal)."""
    win, hop = config.window_length, config.hop_length
    n_frames = spec.shape[0]
    n_out = (n_frames - 1) * hop + win
    w = _window(config)
    segs = np.fft.irfft(spec, n=config.fft_size, axis=1)[:, :win] * w[None, :]
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    for t in range(n_frames):
        s = t * hop
        out[s:s + win] += segs[t]
        norm[s:s + win] += w * w
    return out / np.maximum(norm, 1e-12)


def analyze(waveform: np.ndarray, config: DspConfig) -> tuple[Spectrogram, Spectrogram]:
    """Short-time magnitude and mel spectrograms of a mono waveform."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size == 0:
        raise ValueError("waveform must be a non-empty 1-d array")
    if waveform.size < config.window_length:
        raise ValueError(
            f"waveform of {waveform.size} samples is shorter than one "
            f"window ({config.window_length} samples)")
    pad = config.window_length // 2
    padded = np.pad(waveform, pad, mode="reflect")
    mag = _stft_magnitude(padded, config)
    mel = mag @ mel_filterbank(config).T
    shift = config.frame_shift
    return (Spectrogram(mag, shift, "linear"), Spectrogram(mel, shift, "mel"))


def griffin_lim(spectrogram: Spectrogram, config: DspConfig,
                return_errors: bool = False):
    """Iterative phase reconstruction from a linear-magnitude spectrogram.

    Starts from zero phase and alternates least-squares synthesis with
    magnitude substitution; the spectral reconstruction error is
    non-increasing across iterations.
    """
    if spectrogram.bin_kind != "linear":
        raise ValueError("griffin_lim needs a linear-magnitude spectrogram")
    target = spectrogram.values
    spec = target.astype(np.complex128)  # zero initial phase
    errors = []
    for _ in range(config.griffin_lim_iters):
        wave = _istft(spec, config)
        rebuilt = _stft(wave, config)
        if return_errors:
            errors.append(float(np.linalg.norm(np.abs(rebuilt) - target)))
        mag = np.abs(rebuilt)
        phase = np.where(mag > 1e-12, rebuilt / np.maximum(mag, 1e-12), 1.0)
        spec = target * phase
    wave = _istft(spec, config)
    pad = config.window_length // 2
    wave = wave[pad:wave.shape[0] - pad]
    if return_errors:
        return wave, np.asarray(errors)
    return wave


def mel_to_linear(mel: Spectrogram, config: DspConfig) -> Spectrogram:
    """Project a mel spectrogram back to linear bins (pseudo-inverse, clamped at 0)."""
    if mel.bin_kind != "mel":
        raise ValueError("mel_to_linear needs a mel spectrogram")
    pinv = _mel_pinv(config.sample_rate, config.fft_size, config.mel_bins,
                     config.mel_fmin, config.mel_fmax)
    linear = np.maximum(mel.values @ pinv.T, 0.0)
    return Spectrogram(linear, mel.frame_shift, "linear")


def compress(values: np.ndarray) -> np.ndarray:
    """Dynamic-range compression applied before modeling: log(1 + S)."""
    return np.log1p(np.maximum(values, 0.0))


def decompress(values: np.ndarray) -> np.ndarray:
    """Inverse of `compress`, clamped at 0."""
    return np.maximum(np.expm1(values), 0.0)


def read_wav(path: str | Path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM wave file as float64 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expected_rate}")
    if data.dtype == np.int16:
        wave = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample dtype {data.dtype}")
    return wave, rate


def write_wav(path: str | Path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write a mono waveform as 16-bit PCM, clipping to [-1, 1]."""
    clipped = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
