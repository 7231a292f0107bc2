"""Dense float64 arrays with a tape-based reverse-mode gradient engine.

Usage::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = sum_(mul(x, x))
    tape.backward(y)
    x.grad  # == 2 * x.data

Only operations executed while a :class:`Tape` is active, and that involve at
least one tensor with ``requires_grad=True``, are recorded.  Outside a tape the
same functions run as plain numpy forward computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "gelu",
    "softmax_lastdim",
    "layer_norm",
    "reshape",
    "transpose",
    "where",
    "masked_fill",
    "concat",
    "getitem",
    "sum_",
    "mean",
    "check_gradients",
    "gradient_pair",
    "gradient_rel_error",
]

DTYPE = np.float64
LN_EPS = 1e-6

_ACTIVE: list["Tape"] = []


class Tensor:
    """An immutable-by-convention float64 array that can carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded operation: its kind, input node ids and output tensor."""

    op: str
    inputs: tuple[int, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] = field(repr=False)


class Tape:
    """Records operations in execution order and replays them backwards."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}
        self._tensors: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _id_of(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._ids:
            # leaves get negative ids so they sort before every recorded node
            self._ids[key] = -1 - len(self._leaves)
            self._leaves[key] = t
            self._tensors.append(t)
        return self._ids[key]

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        ids = tuple(self._id_of(t) for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(Node(op, ids, out, backward))
        self._ids[id(out)] = node_id
        self._tensors.append(out)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d loss / d leaf into ``.grad`` of every recorded leaf."""
        if seed is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        if id(loss) not in self._ids or self._ids[id(loss)] < 0:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {self._ids[id(loss)]: np.asarray(seed, dtype=DTYPE)}
        for node_id in range(self._ids[id(loss)], -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            for in_id, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                prev = grads.get(in_id)
                grads[in_id] = gi if prev is None else prev + gi
        for key, leaf in self._leaves.items():
            g = grads.get(self._ids[key])
            if g is None or not leaf.requires_grad:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _tape_for(*inputs: Tensor) -> Tape | None:
    if not _ACTIVE:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_for(*inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    # np.maximum propagates NaN, so bad values still reach the loss check
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU; smooth, so safe under finite differences."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _make("gelu", out, (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make("matmul", out, (a, b), backward)


def softmax_lastdim(x, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allowed`` is an optional boolean array broadcastable to ``x``; disallowed
    entries get weight exactly 0.  A slice with no allowed entry yields all zeros.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: last dimension must be >= 1")
    z = x.data
    if allowed is not None:
        allowed = np.broadcast_to(allowed, z.shape)
        z = np.where(allowed, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gain, bias), backward)


# ---------------------------------------------------------------- structural


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (``cond`` is a constant mask)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make("where", out, (a, b), backward)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data)
    return _make("masked_fill", out, (x,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, xs, backward)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", x.data[index], (x,), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- gradient oracle


def gradient_pair(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Tape gradient and central-difference gradient, flattened over ``params``.

    ``f`` recomputes a scalar from the current contents of ``params``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ContractError(f"check_gradients needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)

    analytic, numeric = [], []
    for p in params:
        analytic.append((p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1))
        flat = p.data.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * eps)
        numeric.append(fd)
    if not analytic:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(analytic), np.concatenate(numeric)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max elementwise relative error ``|analytic - fd| / (|fd| + 1e-12)``."""
    analytic, fd = gradient_pair(f, params, eps)
    if analytic.size == 0:
        return 0.0
    return float((np.abs(analytic - fd) / (np.abs(fd) + 1e-12)).max())


def gradient_rel_error(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Relative error of the whole gradient vector, ``||analytic - fd|| / ||fd||``.

    Unlike the elementwise maximum this is not dominated by entries whose
    true gradient is zero (where the difference quotient is pure roundoff).
    """
    analytic, fd = gradient_pair(f, params, eps)
    scale = np.linalg.norm(fd)
    if scale == 0.0:
        return float(np.linalg.norm(analytic))
    return float(np.linalg.norm(analytic - fd) / scale)
