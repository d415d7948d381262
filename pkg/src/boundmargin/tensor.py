"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each differentiable op returns a new :class:`Tensor` that remembers its
operands and a closure mapping the output gradient to operand gradients.
:func:`backward` orders the recorded graph topologically and replays the
closures once each, so inputs receive gradients exactly like parameters do.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording operations (cheaper forward passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- reductions and shape manipulation -----------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def norm(a, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0.0, n, 1.0)
        scale = np.where(n > 0.0, np.expand_dims(g, axis) / safe, 0.0)
        return (a.data * scale,)

    return _make(out, (a,), backward, "norm")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an ``N x C x H x W`` batch with ``F x C x kh x kw`` filters."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel has {kc} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _conv_windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def pool2d(x, kind: str = "max", window: int = 2, stride: int | None = None) -> Tensor:
    """Max or average pooling over square windows of an ``N x C x H x W`` batch.

    Max pooling routes the gradient to the lowest flat index among tied maxima.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = _conv_windows(x.data, window, window, stride).reshape(n, c, ho, wo, window * window)
    if kind == "max":
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    else:
        out = win.mean(axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                if kind == "max":
                    contrib = np.where(arg == i * window + j, g, 0.0)
                else:
                    contrib = g / (window * window)
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        return (gx,)

    return _make(out, (x,), backward, f"{kind}pool")


# -- activations and probabilistic heads ---------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.shape[axis] < 2:
        raise DimensionError("softmax needs at least two classes")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward, "softmax")


PROB_FLOOR = 1e-12


def cross_entropy(probs, labels) -> Tensor:
    """``-log p[label]`` per row, with probabilities floored at 1e-12.

    A 1-D ``probs`` with an integer label yields a scalar; a 2-D batch with a
    label vector yields one loss per row.
    """
    probs = as_tensor(probs)
    single = probs.ndim == 1
    p2 = probs.data[None, :] if single else probs.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = p2.shape[1]
    if lab.shape[0] != p2.shape[0]:
        raise DimensionError(f"{p2.shape[0]} rows but {lab.shape[0]} labels")
    if (lab < 0).any() or (lab >= n).any():
        raise IndexError(f"label out of range for {n} classes")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, lab]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = -np.log(clamped)

    def backward(g):
        full = np.zeros_like(p2)
        full[rows, lab] = np.where(picked > PROB_FLOOR, -g.reshape(-1) / clamped, 0.0)
        return (full[0] if single else full,)

    return _make(out[0] if single else out, (probs,), backward, "cross_entropy")


def log_softmax_cross_entropy(logits, labels) -> Tensor:
    """Fused, overflow-free ``-log softmax(logits)[label]`` per row."""
    logits = as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = lse - z[rows, lab]

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        return (p * g[:, None],)

    return _make(out, (logits,), backward, "log_softmax_cross_entropy")


# -- backward pass -------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate ``d root / d t`` into ``t.grad`` for every tracked tensor."""
    if root.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64).reshape(root.shape)
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
