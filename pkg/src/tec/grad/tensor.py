"""Tensor, parameter and tape types for the reverse-mode engine.

Operations only record themselves when a :class:`Tape` is active and at least
one input requires a gradient. Outside a tape every op is a plain numpy call,
which is what inference uses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

DTYPE = np.float64

_tape_stack: List["Tape"] = []
_nan_guard = False


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Sequence[Tensor] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.mul(self, 1.0 / other) if np.isscalar(other) else ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records op outputs in creation order.

    Creation order is already a topological order of the graph, so backward
    simply walks the record in reverse. A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


@contextlib.contextmanager
def nan_guard(enabled: bool = True):
    """Check every op output for non-finite values while active."""
    global _nan_guard
    prev = _nan_guard
    _nan_guard = enabled
    try:
        yield
    finally:
        _nan_guard = prev


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result, recording it on the active tape if needed."""
    if _nan_guard and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape, params: Optional[Iterable[Parameter]] = None) -> Dict[str, np.ndarray]:
    """Back-propagate ``loss`` through ``tape``.

    Returns a gradient per parameter name. Parameters listed in ``params`` but
    unreachable from the loss get an all-zero gradient. Gradients are plain
    arrays, so differentiating a backward pass is not possible; a consumed
    tape raises instead of silently double counting.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already differentiated; higher-order gradients are not supported")
    if not loss.requires_grad:
        raise RuntimeError("loss is not on the tape (no input requires grad)")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        node.backward_fn(g)
        for p in node.parents:
            if isinstance(p, Parameter):
                leaves[p.name] = p
        node.grad = None
    grads: Dict[str, np.ndarray] = {}
    for name, p in leaves.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    if params is not None:
        for p in params:
            if p.name not in grads:
                grads[p.name] = np.zeros_like(p.data)
    return grads
