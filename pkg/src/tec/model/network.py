"""Sequence-to-sequence echo-cancellation network.

Batches are padded; every layer re-applies the validity mask after its
normalization so padded positions stay zero, which keeps a padded batch
equivalent to running each utterance alone (up to batch statistics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..grad import ops
from ..grad.layers import (BatchNorm, BiConvLSTM, BiLSTM, Conv1d, Conv2d, Dense, LSTM,
                           ParamStore)
from ..grad.tensor import ShapeError, Tensor, as_tensor
from .config import AudioEncoderConfig, AttentionConfig, DecoderConfig, Mode, ModelConfig, TextEncoderConfig


class EncoderInputError(ValueError):
    pass


def length_mask(lengths: Sequence[int], steps: int) -> np.ndarray:
    return (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero padded time steps; ``mask`` is (B, T) and broadcasts over trailing axes."""
    return ops.mul(x, mask.reshape(mask.shape + (1,) * (x.ndim - 2)))


def encoded_length(t: int, conv_layers: int = 2) -> int:
    for _ in range(conv_layers):
        t = -(-t // 2)
    return t


@dataclass
class Encoded:
    values: Tensor          # (B, T', H)
    lengths: List[int]

    @property
    def mask(self) -> np.ndarray:
        return length_mask(self.lengths, self.values.shape[1])


class AudioEncoder:
    """2 strided conv layers, a bidirectional conv-LSTM over frequency, then
    stacked Bi-LSTMs; ReLU + batch norm after every layer."""

    def __init__(self, store: ParamStore, name: str, cfg: AudioEncoderConfig, mel_dim: int,
                 clstm_substitute: str = "clstm"):
        self.cfg = cfg
        self.substitute = clstm_substitute
        self.convs, self.conv_bns = [], []
        cin, freq = 1, mel_dim
        for i in range(cfg.conv_layers):
            self.convs.append(Conv2d(store, f"{name}/conv{i}", (3, 3), cin, cfg.conv_channels, (2, 2)))
            self.conv_bns.append(BatchNorm(store, f"{name}/conv{i}/bn", cfg.conv_channels))
            cin, freq = cfg.conv_channels, -(-freq // 2)
        self.freq = freq
        if clstm_substitute == "clstm":
            self.clstm = BiConvLSTM(store, f"{name}/clstm", cin, cfg.clstm_units, cfg.clstm_kernel)
            self.clstm_bn = BatchNorm(store, f"{name}/clstm/bn", 2 * cfg.clstm_units)
            din = freq * 2 * cfg.clstm_units
        else:
            self.clstm = BiLSTM(store, f"{name}/clstm", freq * cin, cfg.clstm_units)
            self.clstm_bn = BatchNorm(store, f"{name}/clstm/bn", 2 * cfg.clstm_units)
            din = 2 * cfg.clstm_units
        self.lstms, self.lstm_bns = [], []
        for i in range(cfg.bilstm_layers):
            self.lstms.append(BiLSTM(store, f"{name}/bilstm{i}", din, cfg.bilstm_units))
            self.lstm_bns.append(BatchNorm(store, f"{name}/bilstm{i}/bn", 2 * cfg.bilstm_units))
            din = 2 * cfg.bilstm_units

    def __call__(self, x: np.ndarray, lengths: Sequence[int], training: bool) -> Encoded:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"audio encoder expects (B, T, D) input, got {x.shape}")
        min_len = 2 ** (self.cfg.conv_layers)
        if min(lengths) < min_len:
            raise EncoderInputError(f"input too short: need at least {min_len} frames, got {min(lengths)}")
        lengths = list(lengths)
        mask = length_mask(lengths, x.shape[1])
        h = as_tensor((x * mask[:, :, None])[..., None])
        for conv, bn in zip(self.convs, self.conv_bns):
            h = ops.relu(conv(h))
            lengths = [-(-n // 2) for n in lengths]
            mask = length_mask(lengths, h.shape[1])
            h = _masked(bn(h, training, mask), mask)
        bsz, steps = h.shape[0], h.shape[1]
        if self.substitute == "clstm":
            h = ops.relu(self.clstm(h, lengths))
            h = _masked(self.clstm_bn(h, training, mask), mask)
            h = ops.reshape(h, (bsz, steps, -1))
        else:
            h = ops.reshape(h, (bsz, steps, -1))
            h = ops.relu(self.clstm(h, lengths))
            h = _masked(self.clstm_bn(h, training, mask), mask)
        for lstm, bn in zip(self.lstms, self.lstm_bns):
            h = ops.relu(lstm(h, lengths))
            h = _masked(bn(h, training, mask), mask)
        return Encoded(h, lengths)


class TextEncoder:
    """Embedding table, 3 conv layers (kernel 5), one Bi-LSTM."""

    def __init__(self, store: ParamStore, name: str, cfg: TextEncoderConfig):
        self.cfg = cfg
        self.table = store.add(f"{name}/embedding", (cfg.vocab_size, cfg.embedding_dim), init="normal", value=0.3)
        self.convs, self.bns = [], []
        din = cfg.embedding_dim
        for i in range(cfg.conv_layers):
            self.convs.append(Conv1d(store, f"{name}/conv{i}", cfg.conv_kernel, din, cfg.conv_channels))
            self.bns.append(BatchNorm(store, f"{name}/conv{i}/bn", cfg.conv_channels))
            din = cfg.conv_channels
        self.lstm = BiLSTM(store, f"{name}/bilstm", din, cfg.bilstm_units)
        self.lstm_bn = BatchNorm(store, f"{name}/bilstm/bn", 2 * cfg.bilstm_units)

    def __call__(self, ids: np.ndarray, lengths: Sequence[int], training: bool) -> Encoded:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"text encoder expects (B, T) ids, got {ids.shape}")
        if min(lengths) < 1:
            raise EncoderInputError("empty phoneme sequence")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise EncoderInputError(f"token id outside embedding table of {self.cfg.vocab_size}")
        lengths = list(lengths)
        mask = length_mask(lengths, ids.shape[1])
        h = _masked(ops.take_rows(self.table, ids), mask)
        for conv, bn in zip(self.convs, self.bns):
            h = ops.relu(conv(h))
            h = _masked(bn(h, training, mask), mask)
        h = ops.relu(self.lstm(h, lengths))
        h = _masked(self.lstm_bn(h, training, mask), mask)
        return Encoded(h, lengths)


@dataclass
class GmmAttentionState:
    kappa: Tensor                     # (B, K) mixture positions
    context: Tensor                   # (B, context_dim) previous context
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None  # (B, L) last window


@dataclass
class AttentionMemory:
    projected: Tensor   # (B, L, context_dim), memory already multiplied by the projection
    mask: np.ndarray    # (B, L)


class GmmAttention:
    """Location-based Gaussian-mixture attention with monotone positions.

    A dense layer on [query; previous context] yields per-component logits
    for weight, width and position step: alpha = softmax, beta =
    softplus + min_width, kappa += softplus. The context is the projection of
    the window-weighted memory sum; the projection is linear, so it is
    applied to the memory once up front.
    """

    def __init__(self, store: ParamStore, name: str, cfg: AttentionConfig, query_dim: int, memory_dim: int):
        self.cfg = cfg
        k = cfg.gmm_components
        self.k = k
        self.query = Dense(store, f"{name}/query", query_dim + cfg.context_dim, 3 * k)
        if self.query.b is not None:
            self.query.b.data[2 * k:] = cfg.step_bias_init
        self.proj_w = store.add(f"{name}/memory_proj/kernel", (memory_dim, cfg.context_dim))
        self.proj_b = store.add(f"{name}/memory_proj/bias", (cfg.context_dim,), init="const")

    def prepare(self, enc: Encoded) -> AttentionMemory:
        return AttentionMemory(ops.linear(enc.values, self.proj_w), enc.mask)

    def initial_state(self, batch: int) -> GmmAttentionState:
        return GmmAttentionState(as_tensor(np.zeros((batch, self.k))),
                                 as_tensor(np.zeros((batch, self.cfg.context_dim))))

    def step(self, q: Tensor, state: GmmAttentionState, memory: AttentionMemory
             ) -> Tuple[Tensor, GmmAttentionState]:
        k = self.k
        p = self.query(ops.concat([q, state.context], axis=-1))
        alpha = ops.softmax(p[:, :k], axis=-1)
        beta = ops.add(ops.softplus(p[:, k:2 * k]), self.cfg.min_width)
        kappa = ops.add(state.kappa, ops.softplus(p[:, 2 * k:]))
        length = memory.projected.shape[1]
        phi = ops.mul(ops.gmm_window(alpha, beta, kappa, length), memory.mask)
        bsz = phi.shape[0]
        ctx = ops.matmul(ops.reshape(phi, (bsz, 1, length)), memory.projected)
        ctx = ops.add(ops.reshape(ctx, (bsz, self.cfg.context_dim)), self.proj_b)
        return ctx, GmmAttentionState(kappa, ctx, alpha.data, beta.data, phi.data)


@dataclass
class DecoderState:
    prev_frame: Tensor
    h: List[Optional[Tensor]]
    c: List[np.ndarray]
    attention: Dict[str, GmmAttentionState]
    step: int = 0
    last_contexts: Dict[str, Tensor] = field(default_factory=dict)
    context: Optional[Tensor] = None  # summed context of the last step
    rng: Optional[np.random.Generator] = None  # pre-net dropout stream


class Decoder:
    def __init__(self, store: ParamStore, name: str, cfg: DecoderConfig, context_dim: int):
        self.cfg = cfg
        self.prenet = []
        din = cfg.mel_dim
        for i in range(cfg.prenet_layers):
            self.prenet.append(Dense(store, f"{name}/prenet{i}", din, cfg.prenet_units))
            din = cfg.prenet_units
        self.lstms = []
        din = cfg.prenet_units + context_dim
        for i in range(cfg.lstm_layers):
            self.lstms.append(LSTM(store, f"{name}/lstm{i}", din, cfg.lstm_units))
            din = cfg.lstm_units
        self.mel_out = Dense(store, f"{name}/mel_proj", cfg.lstm_units + context_dim, cfg.mel_dim)
        self.stop_out = Dense(store, f"{name}/stop_proj", cfg.lstm_units + context_dim, cfg.stop_dim)
        self.post_convs, self.post_bns = [], []
        cin = cfg.mel_dim
        for i in range(cfg.postnet_layers):
            cout = cfg.mel_dim if i == cfg.postnet_layers - 1 else cfg.postnet_channels
            self.post_convs.append(Conv1d(store, f"{name}/postnet{i}", cfg.postnet_kernel, cin, cout))
            self.post_bns.append(BatchNorm(store, f"{name}/postnet{i}/bn", cout))
            cin = cout

    def prenet_forward(self, frame, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = frame
        rate = self.cfg.prenet_dropout
        for layer in self.prenet:
            h = ops.relu(layer(h))
            if rate > 0.0 and rng is not None:
                keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
                h = ops.mul(h, keep)
        return h

    def postnet(self, zpre: Tensor, mask: np.ndarray, training: bool) -> Tensor:
        """Residual predicted by the post-net (tanh on all but the last layer)."""
        h = _masked(zpre, mask)
        last = len(self.post_convs) - 1
        for i, (conv, bn) in enumerate(zip(self.post_convs, self.post_bns)):
            h = bn(conv(h), training, mask)
            if i < last:
                h = ops.tanh(h)
            h = _masked(h, mask)
        return h


class TecModel:
    """Audio encoder + optional second encoder + multi-source GMM attention +
    autoregressive decoder. The second source is the text encoder (TEC), a
    second audio encoder over the playback (AEC_SEQ2SEQ), or absent
    (VANILLA)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, materialize: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.mode = cfg.mode
        self.store = ParamStore(seed, materialize)
        mel = cfg.decoder.mel_dim
        self.audio_enc = AudioEncoder(self.store, "audio_enc", cfg.audio_enc, mel, cfg.clstm_substitute)
        self.text_enc: Optional[TextEncoder] = None
        self.playback_enc: Optional[AudioEncoder] = None
        query_dim = cfg.decoder.prenet_units
        self.attention: Dict[str, GmmAttention] = {
            "audio": GmmAttention(self.store, "attn_audio", cfg.attention, query_dim, cfg.audio_enc.output_dim)
        }
        if self.mode is Mode.TEC:
            self.text_enc = TextEncoder(self.store, "text_enc", cfg.text_enc)
            self.attention["text"] = GmmAttention(self.store, "attn_text", cfg.attention, query_dim,
                                                  cfg.text_enc.output_dim)
        elif self.mode is Mode.AEC_SEQ2SEQ:
            self.playback_enc = AudioEncoder(self.store, "playback_enc", cfg.audio_enc, mel, cfg.clstm_substitute)
            self.attention["playback"] = GmmAttention(self.store, "attn_playback", cfg.attention, query_dim,
                                                      cfg.audio_enc.output_dim)
        self.decoder = Decoder(self.store, "decoder", cfg.decoder, cfg.attention.context_dim)

    # -- introspection --------------------------------------------------------
    @property
    def params(self):
        return list(self.store.params.values())

    def parameter_count(self, prefix: str = "") -> int:
        return self.store.count(prefix)

    @property
    def second_source(self) -> Optional[str]:
        return {Mode.TEC: "text", Mode.AEC_SEQ2SEQ: "playback"}.get(self.mode)

    # -- encoders -------------------------------------------------------------
    def encode(self, x, x_lengths, side=None, side_lengths=None, training: bool = False) -> Dict[str, Encoded]:
        enc = {"audio": self.audio_enc(x, x_lengths, training)}
        if self.mode is Mode.TEC:
            if side is None:
                raise EncoderInputError("TEC mode needs a phoneme sequence")
            enc["text"] = self.text_enc(side, side_lengths, training)
        elif self.mode is Mode.AEC_SEQ2SEQ:
            if side is None:
                raise EncoderInputError("AEC_SEQ2SEQ mode needs playback features")
            enc["playback"] = self.playback_enc(side, side_lengths, training)
        return enc

    def prepare_memories(self, enc: Dict[str, Encoded]) -> Dict[str, AttentionMemory]:
        return {name: self.attention[name].prepare(e) for name, e in enc.items()}

    # -- decoder --------------------------------------------------------------
    def initial_state(self, batch: int, seed: int = 0) -> DecoderState:
        d = self.cfg.decoder
        rng = np.random.default_rng([self.store.seed, seed]) if d.prenet_dropout > 0 else None
        return DecoderState(
            prev_frame=as_tensor(np.zeros((batch, d.mel_dim))),
            h=[None] * d.lstm_layers,
            c=[np.zeros((batch, d.lstm_units)) for _ in range(d.lstm_layers)],
            attention={name: att.initial_state(batch) for name, att in self.attention.items()},
            rng=rng,
        )

    def attend(self, q: Tensor, state: DecoderState, memories: Dict[str, AttentionMemory]):
        contexts, new_states = {}, {}
        for name, att in self.attention.items():
            contexts[name], new_states[name] = att.step(q, state.attention[name], memories[name])
        total = contexts["audio"]
        for name in contexts:
            if name == "audio":
                continue
            if contexts[name].shape != total.shape:
                raise ShapeError(f"context dim mismatch: {total.shape} vs {contexts[name].shape}")
            total = ops.add(total, contexts[name])
        return total, contexts, new_states

    def decoder_step(self, state: Optional[DecoderState], memories: Dict[str, AttentionMemory],
                     prev_frame=None) -> Tuple[Tensor, Tensor, DecoderState]:
        """One autoregressive step; returns (mel frame, stop logits, new state).

        ``prev_frame`` overrides the state's previous prediction, which is how
        teacher forcing feeds ground truth through this same code path.
        """
        if state is None or not isinstance(state, DecoderState):
            raise RuntimeError("decoder state is not initialized")
        prev = state.prev_frame if prev_frame is None else as_tensor(prev_frame)
        q = self.decoder.prenet_forward(prev, state.rng)
        ctx, contexts, att_states = self.attend(q, state, memories)
        inp = ops.concat([q, ctx], axis=-1)
        hs, cs = [], []
        for i, lstm in enumerate(self.decoder.lstms):
            h_prev = state.h[i]
            if h_prev is None:
                gates = ops.linear(inp, lstm.wx, lstm.b)
            else:
                gates = ops.add(ops.linear(inp, lstm.wx, lstm.b), ops.linear(h_prev, lstm.wh))
            h, c = ops.lstm_cell(gates, state.c[i])
            hs.append(h)
            cs.append(c)
            inp = h
        out_in = ops.concat([inp, ctx], axis=-1)
        mel = self.decoder.mel_out(out_in)
        stop = self.decoder.stop_out(out_in)
        new_state = DecoderState(mel, hs, cs, att_states, state.step + 1, contexts, ctx, state.rng)
        return mel, stop, new_state

    def teacher_forced(self, x, x_lengths, side, side_lengths, z, z_lengths, training: bool = True,
                       dropout_seed: int = 0):
        """Full forward with ground-truth previous frames.

        Returns (zpre, zpost, stop_logits) with shapes (B, Tz, D), (B, Tz, D),
        (B, Tz, 2).
        """
        z = np.asarray(z, dtype=np.float64)
        enc = self.encode(x, x_lengths, side, side_lengths, training)
        memories = self.prepare_memories(enc)
        bsz, steps, _ = z.shape
        state = self.initial_state(bsz, dropout_seed)
        mels, stops = [], []
        for t in range(steps):
            prev = np.zeros_like(z[:, 0]) if t == 0 else z[:, t - 1]
            mel, stop, state = self.decoder_step(state, memories, prev)
            mels.append(mel)
            stops.append(stop)
        zpre = ops.stack(mels, axis=1)
        stop_logits = ops.stack(stops, axis=1)
        mask = length_mask(z_lengths, steps)
        zpost = ops.add(zpre, self.decoder.postnet(zpre, mask, training))
        return zpre, zpost, stop_logits

    def infer(self, x, side=None, max_steps: Optional[int] = None) -> "InferenceResult":
        """Autoregressive decoding of one utterance fed by its own predictions.

        ``x`` is (T, D); ``side`` is a phoneme id sequence (TEC) or a (T, D)
        playback Mel matrix (AEC_SEQ2SEQ). Decoding halts once the stop
        probability exceeds the threshold (that frame is kept) or after
        ``max_steps`` frames, which defaults to 4x the encoded audio length.
        """
        x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        side_b, side_len = None, None
        if side is not None:
            side = np.asarray(getattr(side, "values", side))
            side_b, side_len = side[None], [len(side)]
        enc = self.encode(x[None], [len(x)], side_b, side_len, training=False)
        if max_steps is None:
            max_steps = 4 * enc["audio"].lengths[0]
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        memories = self.prepare_memories(enc)
        state = self.initial_state(1)
        frames, probs, kappas = [], [], []
        truncated = True
        for _ in range(max_steps):
            mel, stop, state = self.decoder_step(state, memories)
            p = ops._sigmoid(stop.data[0, 1] - stop.data[0, 0])
            frames.append(mel.data[0])
            probs.append(float(p))
            kappas.append({k: s.kappa.data[0].copy() for k, s in state.attention.items()})
            if p > self.cfg.stop_threshold:
                truncated = False
                break
        zpre = np.stack(frames)
        mask = np.ones((1, len(frames)))
        zpost = zpre + self.decoder.postnet(as_tensor(zpre[None]), mask, training=False).data[0]
        return InferenceResult(zpost, zpre, np.array(probs), truncated, kappas)


@dataclass
class InferenceResult:
    mel: np.ndarray          # post-net output (T, D)
    mel_pre: np.ndarray
    stop_probs: np.ndarray
    truncated: bool
    kappas: List[Dict[str, np.ndarray]]


# -- loss ---------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l2_pre: float
    l2_post: float
    l1_pre: float
    l1_post: float
    stop_ce: float

    @property
    def total(self) -> float:
        return self.l2_pre + self.l2_post + self.l1_pre + self.l1_post + self.stop_ce

    def as_dict(self) -> Dict[str, float]:
        return {"l2_pre": self.l2_pre, "l2_post": self.l2_post, "l1_pre": self.l1_pre,
                "l1_post": self.l1_post, "stop_ce": self.stop_ce, "total": self.total}


def stop_targets(lengths: Sequence[int], steps: int) -> np.ndarray:
    """One-hot (B, T, 2) targets: class 1 only on each sequence's final frame."""
    out = np.zeros((len(lengths), steps, 2))
    out[:, :, 0] = 1.0
    for b, n in enumerate(lengths):
        out[b, n - 1] = (0.0, 1.0)
    return out


def loss_terms(zpre: Tensor, zpost: Tensor, z: np.ndarray, stop_logits: Tensor, targets: np.ndarray,
               lengths: Sequence[int], pos_weight: float = 5.0) -> Dict[str, Tensor]:
    """The five loss terms as graph tensors, each averaged over the batch.

    Within an utterance the L1/L2 terms are sums over the whole (T, D)
    matrix; the stop cross entropy is a per-frame average, with frames whose
    target is the stop class weighted by ``pos_weight``.
    """
    z = np.asarray(z, dtype=np.float64)
    if zpre.shape != z.shape or zpost.shape != z.shape:
        raise ShapeError(f"loss: prediction {zpre.shape}/{zpost.shape} vs target {z.shape}")
    if stop_logits.shape[:2] != z.shape[:2] or targets.shape != stop_logits.shape:
        raise ShapeError(f"loss: stop logits {stop_logits.shape} vs targets {targets.shape}")
    bsz, steps = z.shape[:2]
    mask = length_mask(lengths, steps)
    m3 = mask[:, :, None]
    d_pre = ops.mul(ops.sub(zpre, z), m3)
    d_post = ops.mul(ops.sub(zpost, z), m3)
    scale = 1.0 / bsz
    weights = np.where(targets[..., 1] > 0.5, pos_weight, 1.0) * mask / mask.sum(axis=1, keepdims=True)
    ce = ops.mul(ops.log_softmax(stop_logits, axis=-1), -targets * weights[..., None])
    return {
        "l2_pre": ops.mul(ops.sum(ops.square(d_pre)), scale),
        "l2_post": ops.mul(ops.sum(ops.square(d_post)), scale),
        "l1_pre": ops.mul(ops.sum(ops.abs(d_pre)), scale),
        "l1_post": ops.mul(ops.sum(ops.abs(d_post)), scale),
        "stop_ce": ops.mul(ops.sum(ce), scale),
    }


def total_loss(terms: Dict[str, Tensor]) -> Tensor:
    out = terms["l2_pre"]
    for key in ("l2_post", "l1_pre", "l1_post", "stop_ce"):
        out = ops.add(out, terms[key])
    return out


def breakdown(terms: Dict[str, Tensor]) -> LossBreakdown:
    return LossBreakdown(**{k: float(v.data) for k, v in terms.items()})


def compute_loss(zpre, zpost, z, stop_logits, stop_target, pos_weight: float = 5.0) -> LossBreakdown:
    """Loss for a single utterance given (T, D) matrices and (T, 2) logits/targets."""
    zpre, zpost, stop_logits = (as_tensor(np.asarray(getattr(a, "data", a))[None]) for a in (zpre, zpost, stop_logits))
    z = np.asarray(z)[None]
    stop_target = np.asarray(stop_target, dtype=np.float64)[None]
    if zpre.shape != z.shape:
        raise ShapeError(f"length mismatch: prediction {zpre.shape[1:]} vs target {z.shape[1:]}")
    return breakdown(loss_terms(zpre, zpost, z, stop_logits, stop_target, [z.shape[1]], pos_weight))


def variant_factory(mode, cfg: ModelConfig, seed: int = 0) -> TecModel:
    """Build the TEC model or one of its baselines."""
    return TecModel(cfg.with_mode(mode), seed)
