"""Feature extraction, batching, teacher-forced training and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .. import phonemes
from ..dsp import SpectralConfig, mel_spectrogram, read_wav
from ..grad import checkpoint
from ..grad.layers import load_state_dict, state_dict
from ..grad.optim import Adam, ExponentialDecay
from ..grad.tensor import Tape, backward
from ..synth import MixtureRecord
from .config import Mode, ModelConfig
from .network import LossBreakdown, TecModel, breakdown, loss_terms, stop_targets, total_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, worst: str, detail: str):
        super().__init__(f"non-finite loss at step {step}; worst parameter {worst} ({detail})")
        self.step = step
        self.worst = worst


def spectral_config_for(cfg: ModelConfig) -> SpectralConfig:
    """Analysis settings whose Mel width matches the model."""
    return SpectralConfig(n_mels=cfg.decoder.mel_dim)


@dataclass
class Example:
    id: str
    x: np.ndarray                  # mixture Mel (T_x, D)
    z: np.ndarray                  # clean Mel (T_z, D)
    side: Optional[np.ndarray]     # phone ids (T_y,) or playback Mel (T_p, D)


def example_from_record(rec: MixtureRecord, mode, spec: SpectralConfig) -> Example:
    mode = Mode.parse(mode)
    x = mel_spectrogram(read_wav(rec.mixture_path), spec).values
    z = mel_spectrogram(read_wav(rec.clean_path), spec).values
    side = None
    if mode is Mode.TEC:
        side = np.array(phonemes.encode(rec.phonemes.split()), dtype=np.int64)
    elif mode is Mode.AEC_SEQ2SEQ:
        side = mel_spectrogram(read_wav(rec.playback_path), spec).values
    return Example(rec.id, x, z, side)


@dataclass
class Batch:
    x: np.ndarray
    x_lengths: List[int]
    z: np.ndarray
    z_lengths: List[int]
    side: Optional[np.ndarray]
    side_lengths: Optional[List[int]]
    stop: np.ndarray


def _pad(seqs: Sequence[np.ndarray], dtype=np.float64) -> np.ndarray:
    steps = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), steps) + seqs[0].shape[1:], dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def collate(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    z_len = [len(e.z) for e in examples]
    z = _pad([e.z for e in examples])
    side, side_len = None, None
    if examples[0].side is not None:
        dtype = np.int64 if examples[0].side.ndim == 1 else np.float64
        side = _pad([e.side for e in examples], dtype)
        side_len = [len(e.side) for e in examples]
    return Batch(_pad([e.x for e in examples]), [len(e.x) for e in examples], z, z_len,
                 side, side_len, stop_targets(z_len, z.shape[1]))


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    decay_steps: int = 50_000
    seed: int = 0
    log_every: int = 50

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class Trainer:
    def __init__(self, model: TecModel, cfg: TrainConfig = TrainConfig()):
        self.model = model
        self.cfg = cfg
        self.optimizer = Adam(ExponentialDecay(cfg.lr_initial, cfg.lr_final, cfg.decay_steps))
        self.history: List[LossBreakdown] = []

    def train_step(self, batch: Batch) -> LossBreakdown:
        m = self.model
        with Tape() as tape:
            zpre, zpost, stop = m.teacher_forced(batch.x, batch.x_lengths, batch.side, batch.side_lengths,
                                                 batch.z, batch.z_lengths, training=True,
                                                 dropout_seed=self.optimizer.step + 1)
            terms = loss_terms(zpre, zpost, batch.z, stop, batch.stop, batch.z_lengths,
                               m.cfg.stop_pos_weight)
            loss = total_loss(terms)
        result = breakdown(terms)
        grads = backward(loss, tape, m.params)
        if not np.isfinite(result.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            worst, detail = self._worst(grads)
            raise TrainingDivergedError(self.optimizer.step, worst, detail)
        self.optimizer.update(m.params, grads)
        self.history.append(result)
        return result

    @staticmethod
    def _worst(grads: Dict[str, np.ndarray]):
        bad = {n: int(np.sum(~np.isfinite(g))) for n, g in grads.items()}
        if any(bad.values()):
            name = max(bad, key=bad.get)
            return name, f"{bad[name]} non-finite gradient entries"
        name = max(grads, key=lambda n: float(np.max(np.abs(grads[n]))) if grads[n].size else 0.0)
        return name, f"max |grad| {float(np.max(np.abs(grads[name]))):.3g}"

    def batches(self, examples: Sequence[Example]):
        """Endless deterministic stream of shuffled mini-batches."""
        rng = np.random.default_rng([self.cfg.seed, 7])
        n = len(examples)
        bs = min(self.cfg.batch_size, n)
        while True:
            order = rng.permutation(n)
            for i in range(0, n - bs + 1, bs):
                yield collate([examples[j] for j in sorted(order[i:i + bs])])

    def fit(self, examples: Sequence[Example], steps: Optional[int] = None,
            callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> List[LossBreakdown]:
        steps = self.cfg.steps if steps is None else steps
        stream = self.batches(examples)
        for step in range(steps):
            res = self.train_step(next(stream))
            if callback:
                callback(step, res)
            if self.cfg.log_every and step % self.cfg.log_every == 0:
                log.info("step %d loss %.4f", step, res.total)
        return self.history


def save_model(model: TecModel, path, extra: Optional[Dict] = None) -> None:
    meta = {"config": model.cfg.to_dict(), "seed": model.store.seed}
    if extra:
        meta.update(extra)
    checkpoint.save(path, state_dict(model.store), meta)


def load_model(path) -> TecModel:
    arrays, meta = checkpoint.load(path)
    if "config" not in meta:
        raise checkpoint.FormatError("checkpoint carries no model config")
    model = TecModel(ModelConfig.from_dict(meta["config"]), seed=meta.get("seed", 0))
    load_state_dict(model.store, arrays)
    return model


def load_examples(manifest, mode, cfg: ModelConfig, split: Optional[str] = None) -> List[Example]:
    from ..synth import load_records

    spec = spectral_config_for(cfg)
    recs = load_records(manifest)
    if split is not None:
        recs = [r for r in recs if r.split == split]
    return [example_from_record(r, mode, spec) for r in recs]
