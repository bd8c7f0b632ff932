"""Differentiable operations.

Every op takes tensors (or array-likes, treated as constants) and returns a
new :class:`~tec.grad.tensor.Tensor`. Shapes follow numpy broadcasting where
noted; conv and recurrent ops use channels-last layouts.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, accumulate, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return make_node(out, (a, b), bw, "div")


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, 2.0 * a.data * g)

    return make_node(a.data * a.data, (a,), bw, "square")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def bw(g):
        accumulate(a, np.sign(a.data) * g)

    return make_node(np.abs(a.data), (a,), bw, "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        accumulate(a, g * out)

    return make_node(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, g / a.data)

    return make_node(np.log(a.data), (a,), bw, "log")


# -- activations --------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def bw(g):
        accumulate(a, g * on)

    return make_node(np.where(on, a.data, 0.0), (a,), bw, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        accumulate(a, g * (1.0 - out * out))

    return make_node(out, (a,), bw, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)

    def bw(g):
        accumulate(a, g * out * (1.0 - out))

    return make_node(out, (a,), bw, "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, g * _sigmoid(a.data))

    return make_node(np.logaddexp(0.0, a.data), (a,), bw, "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return make_node(out, (a,), bw, "log_softmax")


# -- reductions and shape ops -------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.shape))

    return make_node(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(g):
        accumulate(a, g.reshape(a.shape))

    return make_node(out, (a,), bw, "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        accumulate(a, g.transpose(inv))

    return make_node(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)

    def bw(g):
        # write in place so per-timestep slicing stays O(slice)
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return make_node(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            accumulate(t, piece)

    return make_node(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            accumulate(t, np.take(g, i, axis=axis))

    return make_node(out, tuple(ts), bw, "stack")


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        accumulate(table, full)

    return make_node(table.data[ids], (table,), bw, "take_rows")


def gather_time(a, index: np.ndarray) -> Tensor:
    """Per-batch reordering along axis 1: ``out[b, t] = a[b, index[b, t]]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:2]:
        raise ShapeError(f"gather_time: index {index.shape} does not match {a.shape[:2]}")
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        accumulate(a, full)

    return make_node(a.data[rows, index], (a,), bw, "gather_time")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            accumulate(b, gb)

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as one node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        if x.requires_grad:
            accumulate(x, g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            accumulate(w, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            accumulate(b, g2.sum(axis=0))

    return make_node(out, parents, bw, "linear")


# -- convolutions -------------------------------------------------------------

def conv1d(x, w, b=None, stride: int = 1, padding: Optional[Tuple[int, int]] = None) -> Tensor:
    """1-D convolution (cross-correlation), channels last.

    x: (N, L, Cin); w: (K, Cin, Cout); b: (Cout,). ``padding`` defaults to
    "same" for odd kernels at stride 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    k, cin, cout = w.shape
    if padding is None:
        padding = ((k - 1) // 2, k // 2)
    pl, pr = padding
    n, length, _ = x.shape
    lout = (length + pl + pr - k) // stride + 1
    if lout < 1:
        raise ShapeError(f"conv1d: input length {length} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pl, pr), (0, 0)))
    span = stride * (lout - 1) + 1
    cols = np.stack([xp[:, j:j + span:stride, :] for j in range(k)], axis=2)
    cols = cols.reshape(n, lout, k * cin)
    wm = w.data.reshape(k * cin, cout)
    out = cols @ wm
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            accumulate(w, (cols.reshape(-1, k * cin).T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            gc = (g @ wm.T).reshape(n, lout, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:stride, :] += gc[:, :, j, :]
            accumulate(x, gxp[:, pl:pl + length, :])

    return make_node(out, parents, bw, "conv1d")


def conv2d(x, w, b=None, stride: Tuple[int, int] = (1, 1),
           padding: Tuple[Tuple[int, int], Tuple[int, int]] = ((0, 0), (0, 0))) -> Tensor:
    """2-D convolution (cross-correlation), channels last.

    x: (N, H, W, Cin); w: (KH, KW, Cin, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    (pt, pb), (pleft, pright) = padding
    n, h, wd, _ = x.shape
    ho = (h + pt + pb - kh) // sh + 1
    wo = (wd + pleft + pright - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pleft, pright), (0, 0)))
    hspan, wspan = sh * (ho - 1) + 1, sw * (wo - 1) + 1
    patches = [xp[:, i:i + hspan:sh, j:j + wspan:sw, :] for i in range(kh) for j in range(kw)]
    cols = np.stack(patches, axis=3).reshape(n, ho, wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wm
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            accumulate(w, (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            gc = (g @ wm.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hspan:sh, j:j + wspan:sw, :] += gc[:, :, :, i * kw + j, :]
            accumulate(x, gxp[:, pt:pt + h, pleft:pleft + wd, :])

    return make_node(out, parents, bw, "conv2d")


# -- recurrent and normalization ---------------------------------------------

def lstm_cell(gates, c_prev) -> Tuple[Tensor, Tensor]:
    """Fused LSTM nonlinearity.

    ``gates`` holds the pre-activations in (input, forget, cell, output)
    order along the last axis. Returns ``(h, c)``; each output back-propagates
    its own contribution so the two nodes stay independent on the tape.
    """
    gates, c_prev = as_tensor(gates), as_tensor(c_prev)
    hdim = c_prev.shape[-1]
    if gates.shape[-1] != 4 * hdim or gates.shape[:-1] != c_prev.shape[:-1]:
        raise ShapeError(f"lstm_cell: gates {gates.shape} do not match state {c_prev.shape}")
    gd = gates.data
    sg = _sigmoid(gd)
    i = sg[..., :hdim]
    f = sg[..., hdim:2 * hdim]
    gg = np.tanh(gd[..., 2 * hdim:3 * hdim])
    o = sg[..., 3 * hdim:]
    c = f * c_prev.data + i * gg
    tc = np.tanh(c)
    h = o * tc

    def through_c(gc, dgates):
        dgates[..., :hdim] = gc * gg * i * (1.0 - i)
        dgates[..., hdim:2 * hdim] = gc * c_prev.data * f * (1.0 - f)
        dgates[..., 2 * hdim:3 * hdim] = gc * i * (1.0 - gg * gg)
        accumulate(c_prev, gc * f)

    def bw_c(g):
        dgates = np.zeros_like(gd)
        through_c(g, dgates)
        accumulate(gates, dgates)

    def bw_h(g):
        dgates = np.zeros_like(gd)
        through_c(g * o * (1.0 - tc * tc), dgates)
        dgates[..., 3 * hdim:] = g * tc * o * (1.0 - o)
        accumulate(gates, dgates)

    c_out = make_node(c, (gates, c_prev), bw_c, "lstm_cell.c")
    h_out = make_node(h, (gates, c_prev), bw_h, "lstm_cell.h")
    return h_out, c_out


class RunningStats:
    """Per-feature running mean/variance used by batch_norm at inference."""

    def __init__(self, features: int, momentum: float = 0.9):
        self.mean = np.zeros(features, dtype=DTYPE)
        self.var = np.ones(features, dtype=DTYPE)
        self.momentum = momentum


def batch_norm(x, gamma, beta, stats: RunningStats, training: bool,
               mask: Optional[np.ndarray] = None, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis but the last.

    In training mode the statistics come from the valid (``mask`` true)
    positions of ``x`` and the running statistics are updated in place; in
    inference mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    feat = x.shape[-1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError(f"batch_norm: parameters {gamma.shape} do not match input {x.shape}")
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean) * inv

        def bw_inf(g):
            if x.requires_grad:
                accumulate(x, g * gamma.data * inv)
            accumulate(gamma, (g * xhat).sum(axis=axes))
            accumulate(beta, g.sum(axis=axes))

        return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), bw_inf, "batch_norm")

    if mask is None:
        m = np.ones(x.shape[:-1], dtype=DTYPE)
    else:
        mask = np.asarray(mask, dtype=DTYPE)
        m = np.broadcast_to(mask.reshape(mask.shape + (1,) * (x.ndim - 1 - mask.ndim)), x.shape[:-1])
    m = m[..., None]
    count = m.sum()
    if count < 2:
        raise ValueError("batch_norm in training mode needs at least 2 valid positions")
    mu = (x.data * m).sum(axis=axes) / count
    centered = x.data - mu
    var = (centered * centered * m).sum(axis=axes) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    stats.mean = stats.momentum * stats.mean + (1 - stats.momentum) * mu
    stats.var = stats.momentum * stats.var + (1 - stats.momentum) * var

    def bw(g):
        accumulate(gamma, (g * xhat).sum(axis=axes))
        accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            dmu = -(dxhat.sum(axis=axes)) * inv
            dvar = -0.5 * (dxhat * centered).sum(axis=axes) * inv ** 3
            accumulate(x, dxhat * inv + m * (dmu + 2.0 * dvar * centered) / count)

    return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "batch_norm")


# -- attention ----------------------------------------------------------------

def gmm_window(alpha, beta, kappa, length: int) -> Tensor:
    """Gaussian-mixture weights over encoder positions ``0..length-1``.

    alpha, beta, kappa: (B, K). Returns (B, length) with
    ``phi[b, j] = sum_k alpha[b,k] * exp(-beta[b,k] * (kappa[b,k] - j)**2)``.
    """
    alpha, beta, kappa = as_tensor(alpha), as_tensor(beta), as_tensor(kappa)
    if not (alpha.shape == beta.shape == kappa.shape) or alpha.ndim != 2:
        raise ShapeError(f"gmm_window: mismatched shapes {alpha.shape}, {beta.shape}, {kappa.shape}")
    pos = np.arange(length, dtype=DTYPE)
    diff = kappa.data[:, :, None] - pos[None, None, :]
    e = np.exp(-beta.data[:, :, None] * diff * diff)
    ae = alpha.data[:, :, None] * e
    out = ae.sum(axis=1)

    def bw(g):
        g3 = g[:, None, :]
        if alpha.requires_grad:
            accumulate(alpha, (g3 * e).sum(axis=2))
        if beta.requires_grad:
            accumulate(beta, -(g3 * ae * diff * diff).sum(axis=2))
        if kappa.requires_grad:
            accumulate(kappa, -2.0 * (g3 * ae * beta.data[:, :, None] * diff).sum(axis=2))

    return make_node(out, (alpha, beta, kappa), bw, "gmm_window")
