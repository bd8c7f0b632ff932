"""Model configuration.

``ModelConfig()`` reproduces the full-size architecture table. ``toy_config``
and ``micro_config`` are the reduced variants used for desk-scale training
and gradient checks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict

from ..phonemes import VOCAB_SIZE


class Mode(str, Enum):
    TEC = "TEC"
    VANILLA = "VANILLA"
    AEC_SEQ2SEQ = "AEC_SEQ2SEQ"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {"tec": cls.TEC, "vanilla": cls.VANILLA, "aec": cls.AEC_SEQ2SEQ,
                   "aec_seq2seq": cls.AEC_SEQ2SEQ}
        key = str(value).lower()
        if key not in aliases:
            raise ValueError(f"unknown mode {value!r}; expected tec, vanilla or aec")
        return aliases[key]


@dataclass
class AudioEncoderConfig:
    conv_layers: int = 2
    conv_channels: int = 32
    clstm_units: int = 256
    clstm_kernel: int = 3
    bilstm_layers: int = 3
    bilstm_units: int = 256

    @property
    def output_dim(self) -> int:
        return 2 * self.bilstm_units


@dataclass
class TextEncoderConfig:
    vocab_size: int = VOCAB_SIZE
    embedding_dim: int = 512
    conv_layers: int = 3
    conv_channels: int = 512
    conv_kernel: int = 5
    bilstm_units: int = 256

    @property
    def output_dim(self) -> int:
        return 2 * self.bilstm_units


@dataclass
class DecoderConfig:
    prenet_layers: int = 2
    prenet_units: int = 256
    lstm_layers: int = 2
    lstm_units: int = 256
    mel_dim: int = 128
    stop_dim: int = 2
    postnet_layers: int = 5
    postnet_channels: int = 512
    postnet_kernel: int = 5
    # applied in training and inference alike; 0 disables
    prenet_dropout: float = 0.0


@dataclass
class AttentionConfig:
    context_dim: int = 128
    gmm_components: int = 5
    min_width: float = 1e-4
    # initial softplus argument for the position step; softplus(-1.5) ~ 0.2
    step_bias_init: float = -1.5


@dataclass
class ModelConfig:
    audio_enc: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    text_enc: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mode: Mode = Mode.TEC
    clstm_substitute: str = "clstm"  # "bilstm" swaps the conv-LSTM for a plain Bi-LSTM
    stop_pos_weight: float = 5.0
    stop_threshold: float = 0.5

    def validate(self) -> "ModelConfig":
        self.mode = Mode.parse(self.mode)
        if self.clstm_substitute not in ("clstm", "bilstm"):
            raise ValueError("clstm_substitute must be 'clstm' or 'bilstm'")
        if self.decoder.stop_dim != 2:
            raise ValueError("stop head is a 2-class softmax")
        if self.mode is Mode.TEC and self.text_enc.output_dim != self.audio_enc.output_dim:
            raise ValueError("audio and text encoder output widths must match")
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mode"] = Mode.parse(self.mode).value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        kw = {}
        for name, sub in (("audio_enc", AudioEncoderConfig), ("text_enc", TextEncoderConfig),
                          ("decoder", DecoderConfig), ("attention", AttentionConfig)):
            kw[name] = sub(**d.pop(name, {}))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw, **d).validate()

    def with_mode(self, mode) -> "ModelConfig":
        return dataclasses.replace(self, mode=Mode.parse(mode))


def toy_config(mode=Mode.TEC) -> ModelConfig:
    """Full-size widths divided by 16, K=2; the Mel width stays at 16 so that
    13 cepstral coefficients can still be taken from model output."""
    return ModelConfig(
        audio_enc=AudioEncoderConfig(conv_channels=2, clstm_units=16, bilstm_units=16),
        text_enc=TextEncoderConfig(embedding_dim=32, conv_channels=32, bilstm_units=16),
        decoder=DecoderConfig(prenet_units=16, lstm_units=16, mel_dim=16, postnet_channels=32),
        attention=AttentionConfig(context_dim=8, gmm_components=2),
        mode=Mode.parse(mode),
    ).validate()


def micro_config(mode=Mode.TEC, clstm_substitute: str = "clstm") -> ModelConfig:
    """Smallest configuration exercising every layer type (gradient checks)."""
    return ModelConfig(
        audio_enc=AudioEncoderConfig(conv_channels=8, clstm_units=8, bilstm_layers=3, bilstm_units=8),
        text_enc=TextEncoderConfig(embedding_dim=8, conv_channels=8, bilstm_units=8),
        decoder=DecoderConfig(prenet_units=8, lstm_units=8, mel_dim=8, postnet_channels=8),
        attention=AttentionConfig(context_dim=8, gmm_components=2),
        mode=Mode.parse(mode),
        clstm_substitute=clstm_substitute,
    ).validate()
