"""Time-domain NLMS acoustic echo canceller."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .dsp import Waveform


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"NLMS weights became non-finite at sample {step}")
        self.step = step


@dataclass(frozen=True)
class NlmsConfig:
    filter_taps: int = 1024
    step_size_mu: float = 0.5
    regularizer_eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.step_size_mu < 2:
            raise ValueError("step_size_mu must be in (0, 2)")
        if self.filter_taps < 1:
            raise ValueError("filter_taps must be >= 1")
        if self.regularizer_eps <= 0:
            raise ValueError("regularizer_eps must be positive")


@dataclass
class AdaptiveFilterState:
    weights: np.ndarray
    reference_buffer: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, taps: int) -> "AdaptiveFilterState":
        return cls(np.zeros(taps), np.zeros(taps))


def nlms_step(state: AdaptiveFilterState, mic_sample: float, ref_sample: float,
              cfg: NlmsConfig, eps: float = None) -> Tuple[float, AdaptiveFilterState]:
    """One adaptation step; returns the echo-cancelled sample and new state.

    The reference buffer holds the newest sample first. ``eps`` overrides the
    config regularizer (the config insists on eps > 0; hand checks use 0).
    """
    eps = cfg.regularizer_eps if eps is None else eps
    u = np.empty_like(state.reference_buffer)
    u[0] = ref_sample
    u[1:] = state.reference_buffer[:-1]
    w = state.weights
    e = mic_sample - float(w @ u)
    power = float(u @ u)
    if power > 0.0 or eps > 0.0:
        # non-finite weights are reported below, not warned about
        with np.errstate(invalid="ignore", over="ignore"):
            w = w + (cfg.step_size_mu * e / (power + eps)) * u
    if not np.all(np.isfinite(w)):
        raise DivergenceError(state.step)
    return e, AdaptiveFilterState(w, u, state.step + 1)


def nlms_cancel(mixture: Waveform, playback: Waveform, cfg: NlmsConfig = NlmsConfig()) -> Waveform:
    """Run NLMS over whole signals; the playback is the far-end reference."""
    if mixture.sample_rate_hz != playback.sample_rate_hz:
        raise ValueError("sample rate mismatch")
    if len(mixture) != len(playback):
        raise ValueError(f"length mismatch ({len(mixture)} vs {len(playback)}); pad first")
    mic = mixture.samples
    ref = playback.samples
    taps = cfg.filter_taps
    mu, eps = cfg.step_size_mu, cfg.regularizer_eps
    # sliding window over a zero-prefixed reference: row n is u(n) reversed
    padded = np.concatenate([np.zeros(taps - 1), ref])
    w = np.zeros(taps)
    out = np.empty(len(mic))
    for n in range(len(mic)):
        u = padded[n:n + taps][::-1]
        e = mic[n] - w @ u
        out[n] = e
        w = w + (mu * e / (u @ u + eps)) * u
        if n % 4096 == 0 and not np.all(np.isfinite(w)):
            raise DivergenceError(n)
    if not np.all(np.isfinite(w)):
        raise DivergenceError(len(mic) - 1)
    return Waveform(out, mixture.sample_rate_hz)
