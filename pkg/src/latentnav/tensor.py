"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every tensor produced by a primitive op remembers its parents and a backward
closure; ``reverse_accumulate`` replays that record in reverse topological
order. Arrays are numpy float64 throughout, row-major. Backward closures are
only built while grad tracking is enabled, so a ``no_grad`` forward pass runs
the exact same numpy calls with no tape overhead.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "debug_checks",
    "reverse_accumulate",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "linear",
    "mlp2",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "t_sum",
    "t_mean",
    "mse",
    "conv_time_reduce",
    "concat",
    "stack",
    "reshape",
    "transpose",
]


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the op's contract."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN/Inf while debug checks were enabled."""


class _Mode(threading.local):
    grad = True
    debug = False


_mode = _Mode()


class no_grad:
    """Context manager disabling tape recording on the current thread."""

    def __enter__(self):
        self._prev = _mode.grad
        _mode.grad = False
        return self

    def __exit__(self, *exc):
        _mode.grad = self._prev
        return False


class debug_checks:
    """Context manager enabling NaN/Inf detection on every primitive output."""

    def __init__(self, enabled: bool = True):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _mode.debug
        _mode.debug = self._enabled
        return self

    def __exit__(self, *exc):
        _mode.debug = self._prev
        return False


def grad_enabled() -> bool:
    return _mode.grad


class Tensor:
    """A numpy float64 array plus the tape record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is not np.ndarray:
            data = np.asarray(data, dtype=np.float64)
        elif data.dtype != np.float64:
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _wrap(out_data: np.ndarray) -> Tensor:
    if _mode.debug and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("primitive produced a non-finite value")
    return Tensor(out_data)


def _node(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _mode.debug and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("primitive produced a non-finite value")
    out = Tensor(out_data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _tracking2(a: Tensor, b: Tensor) -> bool:
    return _mode.grad and (a.requires_grad or b.requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    if not _tracking2(a, b):
        return _wrap(out)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    if not _tracking2(a, b):
        return _wrap(out)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    if not _tracking2(a, b):
        return _wrap(out)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = -a.data
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    return _node(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    return _node(out, (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: stable for any magnitude, one transcendental call
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# matrix / reduction primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2D x 2D, batched ND x ND, or ND x 2D (broadcast rhs)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree for {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul: batch dims disagree for {ad.shape} @ {bd.shape}")
    if not _tracking2(a, b):
        return _wrap(out)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: x @ w + b, with x of any leading shape."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: input dim {xd.shape} vs weight {wd.shape}")
    out = np.matmul(xd, wd)
    out += b.data
    if not (_mode.grad and (x.requires_grad or w.requires_grad or b.requires_grad)):
        return _wrap(out)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return np.matmul(g, wd.T), np.matmul(x2.T, g2), g2.sum(axis=0)

    return _node(out, (x, w, b), backward)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron on the last axis: tanh(x @ w1 + b1) @ w2 + b2."""
    xd, w1d, w2d = x.data, w1.data, w2.data
    if xd.shape[-1] != w1d.shape[0] or w1d.shape[1] != w2d.shape[0]:
        raise DimensionError(
            f"mlp2: input {xd.shape} does not chain through {w1d.shape} and {w2d.shape}"
        )
    h = np.tanh(np.matmul(xd, w1d) + b1.data)
    out = np.matmul(h, w2d) + b2.data
    if not (_mode.grad and (x.requires_grad or w1.requires_grad or b1.requires_grad
                            or w2.requires_grad or b2.requires_grad)):
        return _wrap(out)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        h2 = h.reshape(-1, h.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        dh = np.matmul(g, w2d.T) * (1.0 - h * h)
        dh2 = dh.reshape(-1, dh.shape[-1])
        return (
            np.matmul(dh, w1d.T),
            np.matmul(x2.T, dh2),
            dh2.sum(axis=0),
            np.matmul(h2.T, g2),
            g2.sum(axis=0),
        )

    return _node(out, (x, w1, b1, w2, b2), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)

    def backward(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _node(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.sum(axis=-1, keepdims=True) * (1.0 / n)
    diff = xd - mu
    var = (diff * diff).sum(axis=-1, keepdims=True) * (1.0 / n)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    out = xhat * gamma.data + beta.data
    if not (_mode.grad and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        return _wrap(out)
    gd = gamma.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


def t_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g, dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, (a,), backward)


def t_mean(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.mean(axis=axis)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(shape, g / n, dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _node(out, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries; returns a scalar tensor."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.mean(diff * diff)
    if not _tracking2(a, b):
        return _wrap(out)
    n = a.data.size

    def backward(g):
        d = g * 2.0 * diff / n
        return d, -d

    return _node(out, (a, b), backward)


def conv_time_reduce(s: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise temporal convolution collapsing the frame axis.

    s: (T, M, D), kernel: (T, D); out[m, d] = sum_t kernel[t, d] * s[t, m, d].
    """
    sd, kd = s.data, kernel.data
    if sd.ndim != 3 or kd.ndim != 2 or sd.shape[0] != kd.shape[0] or sd.shape[2] != kd.shape[1]:
        raise DimensionError(f"conv_time_reduce: got frames {sd.shape}, kernel {kd.shape}")
    out = np.einsum("tmd,td->md", sd, kd)
    if not _tracking2(s, kernel):
        return _wrap(out)

    def backward(g):
        ds = np.einsum("md,td->tmd", g, kd)
        dk = np.einsum("tmd,md->td", sd, g)
        return ds, dk

    return _node(out, (s, kernel), backward)


# ---------------------------------------------------------------------------
# structural primitives


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not (_mode.grad and any(p.requires_grad for p in parts)):
        return _wrap(out)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([p.data for p in parts], axis=axis)
    if not (_mode.grad and any(p.requires_grad for p in parts)):
        return _wrap(out)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(parts), backward)


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    old = a.data.shape
    return _node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    if not (_mode.grad and a.requires_grad):
        return _wrap(out)
    inverse = [0] * len(axes)
    for i, ax in enumerate(axes):
        inverse[ax] = i
    inverse = tuple(inverse)
    return _node(out, (a,), lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    """Tape for one backward pass: nodes ordered with inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def reverse_accumulate(loss: Tensor) -> None:
    """One reverse sweep: accumulate d(loss)/d(leaf) into every leaf's ``.grad``.

    Leaves are grad-tracked tensors with no recorded parents (parameters and
    explicitly tracked inputs).
    """
    if loss.data.shape != ():
        raise ContractError(f"reverse_accumulate needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to accumulate")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
