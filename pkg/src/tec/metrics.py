"""Objective metrics: Mel-cepstral distortion, word error rate, FLOPS and
side-input size."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import phonemes
from .dsp import MelSpectrogram, SpectralConfig, Waveform, dtw_align, mel_spectrogram, mfcc, wav_payload_bytes
from .model.config import Mode, ModelConfig

MCD_SCALE = 10.0 / math.log(10.0)


@dataclass(frozen=True)
class McdReport:
    total_db: float
    per_frame_db: float
    aligned_frames: int

    def as_dict(self):
        return asdict(self)


def _cepstra(x, cfg: Optional[SpectralConfig], n_mfcc: int) -> np.ndarray:
    if isinstance(x, Waveform):
        x = mel_spectrogram(x, cfg or SpectralConfig(sample_rate_hz=x.sample_rate_hz))
    values = x.values if isinstance(x, MelSpectrogram) else np.asarray(x, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError(f"mcd: expected a non-empty T x D Mel matrix, got shape {values.shape}")
    return mfcc(values, n_mfcc)


def mcd_from_cepstra(a: np.ndarray, b: np.ndarray) -> McdReport:
    """Distortion between two cepstral sequences summed over their DTW path."""
    path, _ = dtw_align(a, b)
    ia, ib = np.array(path).T
    per_step = np.sqrt(2.0 * np.sum((a[ia] - b[ib]) ** 2, axis=1))
    total = MCD_SCALE * float(per_step.sum())
    return McdReport(total, total / len(path), len(path))


def mcd(enhanced: Union[Waveform, MelSpectrogram, np.ndarray], target: Union[Waveform, MelSpectrogram, np.ndarray],
        cfg: Optional[SpectralConfig] = None, n_mfcc: int = 13) -> McdReport:
    """MCD in dB between two signals given as waveforms or log-Mel matrices."""
    return mcd_from_cepstra(_cepstra(enhanced, cfg, n_mfcc), _cepstra(target, cfg, n_mfcc))


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Union[str, Sequence[str]], hypothesis: Union[str, Sequence[str]]) -> float:
    """(substitutions + deletions + insertions) / reference word count."""
    ref = reference.split() if isinstance(reference, str) else list(reference)
    hyp = hypothesis.split() if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("wer: reference must contain at least one word")
    return edit_distance(ref, hyp) / len(ref)


@dataclass(frozen=True)
class FlopsReport:
    m_audio: int
    m_text: int
    m_dec: int
    t_x: int
    t_y: int
    t_z: int
    flops_atten: int
    total: int

    def recompute(self) -> int:
        return self.m_audio * self.t_x + self.m_text * self.t_y + self.m_dec * self.t_z + self.flops_atten

    def as_dict(self):
        return asdict(self)


def flops_estimate(cfg: ModelConfig, t_x: int, t_y: int, t_z: int) -> FlopsReport:
    """Parameter-count based operation estimate.

    Each encoder and the decoder cost (parameters x steps). Attention costs
    the memory projection size times the source length plus the query layer
    size times the output length, per source. In AEC_SEQ2SEQ mode the second
    audio encoder takes the place of the text encoder and ``t_y`` is the
    playback length.
    """
    from .model.network import TecModel

    model = TecModel(cfg, materialize=False)
    store = model.store
    m_audio = store.count("audio_enc/")
    m_text = store.count("text_enc/") + store.count("playback_enc/")
    m_dec = store.count("decoder/")
    lengths = {"audio": t_x, "text": t_y, "playback": t_y}
    atten = 0
    for name in model.attention:
        prefix = f"attn_{name}/"
        atten += store.count(prefix + "memory_proj/") * lengths[name]
        atten += store.count(prefix + "query/") * t_z
    total = m_audio * t_x + m_text * t_y + m_dec * t_z + atten
    return FlopsReport(m_audio, m_text, m_dec, t_x, t_y, t_z, atten, total)


def side_input_size(record, mode) -> int:
    """Bytes the device must transmit besides the microphone signal."""
    mode = Mode.parse(mode)
    if mode is Mode.VANILLA:
        return 0
    if mode is Mode.TEC:
        tokens = (record.phonemes or "").split()
        if not tokens or not (record.text or "").strip():
            raise ValueError(f"record {record.id}: empty text side input")
        return len(phonemes.serialize(tokens))
    return wav_payload_bytes(record.playback_path)
