"""DSP primitives: waveform I/O, framing, log-Mel features, MFCC, convolution
and DTW alignment.

All functions are pure; arrays are float64.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

DEFAULT_SAMPLE_RATE = 16000


class InputTooShortError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class SpectralConfig:
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    frame_length_ms: float = 50.0
    frame_shift_ms: float = 12.5
    n_mels: int = 128
    n_mfcc: int = 13
    fmin_hz: float = 0.0
    fmax_hz: Optional[float] = None
    log_floor: float = 1e-10
    mel_norm: str = "peak"  # or "area"
    fft_size: Optional[int] = None

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift_ms must not exceed frame_length_ms")
        if not 0 <= self.fmin_hz < self.fmax < 0.5 * self.sample_rate_hz + 1e-9:
            raise ValueError("need 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2")
        if self.fft_size is not None and (self.fft_size < self.frame_length
                                          or self.fft_size & (self.fft_size - 1)):
            raise ValueError("fft_size must be a power of two >= frame length")
        if self.mel_norm not in ("peak", "area"):
            raise ValueError("mel_norm must be 'peak' or 'area'")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate_hz / 1000))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate_hz / 1000))

    @property
    def fmax(self) -> float:
        return self.sample_rate_hz / 2 if self.fmax_hz is None else self.fmax_hz

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        return 1 << (self.frame_length - 1).bit_length()


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_mels:
            raise ValueError(f"expected T x {self.config.n_mels} matrix, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]


# -- WAV I/O ------------------------------------------------------------------

def read_wav(path: Union[str, Path]) -> Waveform:
    """Read 16-bit PCM mono WAV into [-1, 1) floats."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit mono PCM is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate_hz)
        wf.writeframes(to_pcm16(w.samples).tobytes())


def wav_payload_bytes(path: Union[str, Path]) -> int:
    """Size of the sample data chunk (header excluded)."""
    with wave.open(str(path), "rb") as wf:
        return wf.getnframes() * wf.getsampwidth() * wf.getnchannels()


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    if target_rate == w.sample_rate_hz:
        return Waveform(w.samples.copy(), target_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate_hz))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(w)) / w.sample_rate_hz
    return Waveform(np.interp(t_out, t_in, w.samples), target_rate)


# -- spectral analysis --------------------------------------------------------

def hann_window(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def frame_signal(w: Union[Waveform, np.ndarray], cfg: SpectralConfig) -> np.ndarray:
    """Hann-windowed frames, shape (floor((N - L) / S) + 1, L)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    flen, shift = cfg.frame_length, cfg.frame_shift
    if len(x) < flen:
        raise InputTooShortError(f"input too short: {len(x)} samples < frame length {flen}")
    count = (len(x) - flen) // shift + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::shift][:count]
    return frames * hann_window(flen)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectralConfig) -> np.ndarray:
    """Triangular filters on the Mel scale, shape (n_fft // 2 + 1, n_mels)."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate_hz / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, center, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    up = (f - lo) / (center - lo)
    down = (hi - f) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    if cfg.mel_norm == "area":
        fb *= 2.0 / (hi - lo)
    return fb


def magnitude_spectrogram(w: Union[Waveform, np.ndarray], cfg: SpectralConfig) -> np.ndarray:
    frames = frame_signal(w, cfg)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))


def mel_spectrogram(w: Union[Waveform, np.ndarray], cfg: Optional[SpectralConfig] = None) -> MelSpectrogram:
    """Natural-log Mel energies of the magnitude spectrum, floored at log_floor."""
    cfg = cfg or SpectralConfig()
    if isinstance(w, Waveform) and w.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"sample rate {w.sample_rate_hz} does not match config {cfg.sample_rate_hz}")
    energies = magnitude_spectrogram(w, cfg) @ mel_filterbank(cfg)
    return MelSpectrogram(np.log(np.maximum(energies, cfg.log_floor)), cfg)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is coefficient k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def mfcc(m: Union[MelSpectrogram, np.ndarray], n_mfcc: int = 13) -> np.ndarray:
    """Cepstral coefficients 1..n_mfcc of each log-Mel frame (coefficient 0 dropped)."""
    values = m.values if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError(f"expected a non-empty T x D matrix, got shape {values.shape}")
    n_mels = values.shape[1]
    if n_mfcc + 1 > n_mels:
        raise ValueError(f"need at least {n_mfcc + 1} Mel bins for {n_mfcc} coefficients")
    return values @ dct_matrix(n_mels)[1:n_mfcc + 1].T


# -- convolution ----------------------------------------------------------------

def convolve(x, h, method: str = "auto") -> np.ndarray:
    """Full linear convolution, length len(x) + len(h) - 1."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolve: inputs must be non-empty")
    n = x.size + h.size - 1
    if method == "auto":
        method = "fft" if min(x.size, h.size) > 64 else "direct"
    if method == "direct":
        return np.convolve(x, h)
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")
    nfft = 1 << (n - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:n]


# -- dynamic time warping -----------------------------------------------------

def dtw_align(a: np.ndarray, b: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """Minimum-cost monotonic alignment under Euclidean frame distance.

    Steps are (1, 0), (0, 1) and (1, 1). Returns the path from (0, 0) to
    (Ta - 1, Tb - 1) and its summed frame distance.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise ValueError("dtw_align: empty sequence")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dtw_align: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    ta, tb = dist.shape
    acc = np.full((ta + 1, tb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, ta + 1):
        row_prev = acc[i - 1]
        row = acc[i]
        drow = dist[i - 1]
        # vertical and diagonal moves come from the previous row
        best_prev = np.minimum(row_prev[1:], row_prev[:-1])
        for j in range(1, tb + 1):
            m = best_prev[j - 1]
            if row[j - 1] < m:
                m = row[j - 1]
            row[j] = drow[j - 1] + m
    path = [(ta - 1, tb - 1)]
    i, j = ta, tb
    while (i, j) != (1, 1):
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(acc[ta, tb])


# -- Griffin-Lim (listening checks only) --------------------------------------

def griffin_lim(mel: Union[MelSpectrogram, np.ndarray], cfg: SpectralConfig,
                iterations: int = 32, seed: int = 0) -> Waveform:
    """Rough waveform from a log-Mel matrix via filterbank pseudo-inverse."""
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    mag = np.maximum(np.exp(values) @ np.linalg.pinv(mel_filterbank(cfg)), 0.0)
    flen, shift, nfft = cfg.frame_length, cfg.frame_shift, cfg.n_fft
    win = hann_window(flen)
    n = (mag.shape[0] - 1) * shift + flen
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    norm = np.zeros(n)
    for t in range(mag.shape[0]):
        norm[t * shift:t * shift + flen] += win ** 2
    norm = np.maximum(norm, 1e-8)
    x = np.zeros(n)
    for _ in range(iterations):
        frames = np.fft.irfft(mag * phase, n=nfft, axis=1)[:, :flen] * win
        x = np.zeros(n)
        for t in range(mag.shape[0]):
            x[t * shift:t * shift + flen] += frames[t]
        x /= norm
        spec = np.fft.rfft(frame_signal(x, cfg), n=nfft, axis=1)
        phase = np.exp(1j * np.angle(spec))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    return Waveform(x, cfg.sample_rate_hz)
