"""Layer library built on the differentiable ops.

Layers register their parameters in a shared :class:`ParamStore` under
slash-separated names (``"audio_enc/conv0/kernel"``). A store created with
``materialize=False`` only records shapes, which is how parameter counts for
the full-size configuration are derived without allocating it.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import RunningStats
from .tensor import DTYPE, Parameter, Tensor


class ParamStore:
    def __init__(self, seed: int = 0, materialize: bool = True):
        self.seed = seed
        self.materialize = materialize
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        self.stats: "OrderedDict[str, RunningStats]" = OrderedDict()

    def rng(self, name: str) -> np.random.Generator:
        # one stream per parameter name, so init never depends on build order
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(self, name: str, shape: Sequence[int], init: str = "glorot",
            fan: Optional[Tuple[int, int]] = None, value: float = 0.0) -> Optional[Parameter]:
        if name in self.shapes:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        self.shapes[name] = shape
        if not self.materialize:
            return None
        if init == "glorot":
            fan_in, fan_out = fan if fan is not None else (shape[0], shape[-1])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng(name).uniform(-limit, limit, size=shape)
        elif init == "normal":
            data = self.rng(name).normal(0.0, value, size=shape)
        elif init == "const":
            data = np.full(shape, value, dtype=DTYPE)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(data, name)
        self.params[name] = p
        return p

    def add_stats(self, name: str, features: int) -> RunningStats:
        st = RunningStats(features)
        self.stats[name] = st
        return st

    def count(self, prefix: str = "") -> int:
        return int(sum(int(np.prod(s)) for n, s in self.shapes.items() if n.startswith(prefix)))


class Dense:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int, bias: float = 0.0):
        self.w = store.add(f"{name}/kernel", (din, dout))
        self.b = store.add(f"{name}/bias", (dout,), init="const", value=bias)

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.w, self.b)


class Conv1d:
    """Stride-1 "same" convolution along axis 1 of (N, L, C) inputs."""

    def __init__(self, store: ParamStore, name: str, kernel: int, cin: int, cout: int):
        self.w = store.add(f"{name}/kernel", (kernel, cin, cout), fan=(kernel * cin, kernel * cout))
        self.b = store.add(f"{name}/bias", (cout,), init="const")

    def __call__(self, x) -> Tensor:
        return ops.conv1d(x, self.w, self.b)


class Conv2d:
    """Convolution over (time, frequency) with symmetric padding of kernel//2.

    With that padding the output length along each axis is ceil(n / stride)
    for kernel 3, independent of how a batch was padded.
    """

    def __init__(self, store: ParamStore, name: str, kernel: Tuple[int, int], cin: int, cout: int,
                 stride: Tuple[int, int] = (1, 1)):
        kh, kw = kernel
        self.stride = stride
        self.padding = ((kh // 2, kh // 2), (kw // 2, kw // 2))
        self.w = store.add(f"{name}/kernel", (kh, kw, cin, cout), fan=(kh * kw * cin, kh * kw * cout))
        self.b = store.add(f"{name}/bias", (cout,), init="const")

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, features: int):
        self.gamma = store.add(f"{name}/gamma", (features,), init="const", value=1.0)
        self.beta = store.add(f"{name}/beta", (features,), init="const")
        self.stats = store.add_stats(name, features)

    def __call__(self, x, training: bool, mask: Optional[np.ndarray] = None) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, training, mask)


def reverse_index(lengths: Sequence[int], steps: int) -> np.ndarray:
    """Index that reverses each sequence within its own length.

    Padding positions map to themselves, so a reversed batch keeps its valid
    frames first. The map is an involution.
    """
    idx = np.tile(np.arange(steps), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


class LSTM:
    """Unidirectional LSTM over axis 1 of (B, T, D) inputs."""

    def __init__(self, store: ParamStore, name: str, din: int, units: int):
        self.units = units
        self.wx = store.add(f"{name}/wx", (din, 4 * units))
        self.wh = store.add(f"{name}/wh", (units, 4 * units))
        bias = np.zeros(4 * units)
        bias[units:2 * units] = 1.0
        self.b = store.add(f"{name}/bias", (4 * units,), init="const")
        if self.b is not None:
            self.b.data[:] = bias

    def cell(self, x, h, c) -> Tuple[Tensor, Tensor]:
        """One step on (B, D) input with explicit state."""
        gates = ops.add(ops.linear(x, self.wx, self.b), ops.linear(h, self.wh))
        return ops.lstm_cell(gates, c)

    def __call__(self, x) -> Tensor:
        bsz, steps = x.shape[0], x.shape[1]
        gx = ops.linear(x, self.wx, self.b)
        c = np.zeros((bsz, self.units))
        h = None
        outs = []
        for t in range(steps):
            gates = gx[:, t]
            if h is not None:
                gates = ops.add(gates, ops.linear(h, self.wh))
            h, c = ops.lstm_cell(gates, c)
            outs.append(h)
        return ops.stack(outs, axis=1)


class BiLSTM:
    def __init__(self, store: ParamStore, name: str, din: int, units: int):
        self.fw = LSTM(store, f"{name}/fw", din, units)
        self.bw = LSTM(store, f"{name}/bw", din, units)

    def __call__(self, x, lengths: Sequence[int]) -> Tensor:
        idx = reverse_index(lengths, x.shape[1])
        back = ops.gather_time(self.bw(ops.gather_time(x, idx)), idx)
        return ops.concat([self.fw(x), back], axis=-1)


class ConvLSTM:
    """LSTM over time whose state is a frequency map; gates come from a
    kernel-3 convolution along frequency of the input and previous state.

    Input (B, T, F, C) -> output (B, T, F, units).
    """

    def __init__(self, store: ParamStore, name: str, cin: int, units: int, kernel: int = 3):
        self.units = units
        self.wx = store.add(f"{name}/wx", (kernel, cin, 4 * units), fan=(kernel * cin, 4 * units))
        self.wh = store.add(f"{name}/wh", (kernel, units, 4 * units), fan=(kernel * units, 4 * units))
        self.b = store.add(f"{name}/bias", (4 * units,), init="const")
        if self.b is not None:
            self.b.data[units:2 * units] = 1.0

    def __call__(self, x) -> Tensor:
        bsz, steps, freq, cin = x.shape
        gx = ops.conv1d(ops.reshape(x, (bsz * steps, freq, cin)), self.wx, self.b)
        gx = ops.reshape(gx, (bsz, steps, freq, 4 * self.units))
        c = np.zeros((bsz, freq, self.units))
        h = None
        outs = []
        for t in range(steps):
            gates = gx[:, t]
            if h is not None:
                gates = ops.add(gates, ops.conv1d(h, self.wh))
            h, c = ops.lstm_cell(gates, c)
            outs.append(h)
        return ops.stack(outs, axis=1)


class BiConvLSTM:
    def __init__(self, store: ParamStore, name: str, cin: int, units: int, kernel: int = 3):
        self.fw = ConvLSTM(store, f"{name}/fw", cin, units, kernel)
        self.bw = ConvLSTM(store, f"{name}/bw", cin, units, kernel)

    def __call__(self, x, lengths: Sequence[int]) -> Tensor:
        idx = reverse_index(lengths, x.shape[1])
        back = ops.gather_time(self.bw(ops.gather_time(x, idx)), idx)
        return ops.concat([self.fw(x), back], axis=-1)


def parameter_count(store: ParamStore, prefixes: Sequence[str]) -> int:
    return sum(store.count(p) for p in prefixes)


def state_dict(store: ParamStore) -> Dict[str, np.ndarray]:
    """Parameters plus running statistics, keyed by name."""
    out: Dict[str, np.ndarray] = {n: p.data for n, p in store.params.items()}
    for n, st in store.stats.items():
        out[f"{n}/running_mean"] = st.mean
        out[f"{n}/running_var"] = st.var
    return out


def load_state_dict(store: ParamStore, arrays: Dict[str, np.ndarray]) -> None:
    for n, p in store.params.items():
        if n not in arrays:
            raise KeyError(f"checkpoint is missing parameter {n!r}")
        if arrays[n].shape != p.shape:
            raise ValueError(f"shape mismatch for {n!r}: {arrays[n].shape} vs {p.shape}")
        p.data = np.array(arrays[n], dtype=DTYPE)
    for n, st in store.stats.items():
        st.mean = np.array(arrays[f"{n}/running_mean"], dtype=DTYPE)
        st.var = np.array(arrays[f"{n}/running_var"], dtype=DTYPE)
