"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a numpy array; every differentiable operation records a
:class:`Node` on its output holding the parents and a closure that maps
the output gradient to parent gradients. :func:`backward` linearises the
graph reachable from a scalar loss into a :class:`Tape` (topological
order) and replays it in reverse.

Batch dimensions are supported where the backbone needs them (leading
axes of ``matmul``, ``layer_norm``, ``softmax``); general broadcasting is
limited to ``add``/``sub``/``mul``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError

_state = threading.local()
_node_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn", "tape_id")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape_id = next(_node_ids)


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    ``grad`` is only ever set on tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self):
        return None if self._node is None else self._node.tape_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._node = Node(op, parents, backward_fn) if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant (not differentiated)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(0.5 * xd * (1.0 + th), "gelu", (x,), back)


# --------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                 tuple(tensors), back)


def gather_rows(x, idx) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got shape {x.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], "gather_rows", (x,), back)


def index_add_rows(x, idx, src) -> Tensor:
    """Copy of 2-D ``x`` with ``src`` rows added at ``idx``; other rows untouched.

    ``idx`` must not contain duplicates.
    """
    x, src = as_tensor(x), as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or src.shape != (idx.size, x.shape[1]):
        raise ShapeError(f"index_add_rows: x {x.shape}, src {src.shape}, {idx.size} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"index_add_rows index out of range for {x.shape[0]} rows")
    out = x.data.copy()
    out[idx] += src.data
    return _make(out, "index_add_rows", (x, src), lambda g: (g, g[idx]))


# --------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), back)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out.reshape(*lead, wd.shape[0]), "linear", parents, back)


# --------------------------------------------------------------------------
# normalisation and probabilities


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError(f"layer_norm over an empty axis: shape {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    inv_d = 1.0 / d
    xc = xd - xd.sum(axis=-1, keepdims=True) * inv_d
    rstd = 1.0 / np.sqrt(np.einsum("...i,...i->...", xc, xc)[..., None] * inv_d + eps)
    xhat = xc * rstd
    gd = gain.data

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.sum(axis=-1, keepdims=True) * inv_d
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None] * inv_d
            gx = rstd * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _make(xhat * gd + bias.data, "layer_norm", (x, gain, bias), back)


def softmax(x) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), back)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (x,), back)


def l2_normalize(x) -> Tensor:
    """Unit-normalise along the last axis; zero-norm rows are an error."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("cannot normalise a zero-norm vector")
    y = x.data / n

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _make(y, "l2_normalize", (x,), back)


def norm(x) -> Tensor:
    """Euclidean norm over the last axis."""
    x = as_tensor(x)
    n = np.sqrt(np.einsum("...i,...i->...", x.data, x.data))
    xd = x.data

    def back(g):
        if np.any(n == 0.0):
            raise DegenerateInputError("norm gradient undefined at zero")
        return (xd * (g / n)[..., None],)

    return _make(n, "norm", (x,), back)


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along the last axis."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1:] != v.shape[-1:]:
        raise ShapeError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    return tsum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosines: (..., M, D) x (N, D) -> (..., M, N)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def cross_entropy_from_similarities(sims, label, tau: float) -> Tensor:
    """``-log softmax(sims / tau)[label]``, averaged when batched.

    ``sims`` is (N,) with an int label, or (B, N) with B labels.
    """
    sims = as_tensor(sims)
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n = sims.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range for {n} classes: {label}")
    logp = log_softmax(scale(sims, 1.0 / tau))
    if sims.ndim == 1:
        return scale(gather_rows(reshape(logp, (n, 1)), labels), -1.0).reshape(())
    rows = np.arange(sims.shape[0]) * n + labels
    picked = gather_rows(reshape(logp, (-1, 1)), rows)
    return scale(reduce_mean(picked), -1.0)


# --------------------------------------------------------------------------
# backward pass


class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, order: list[Tensor]):
        self.order = order

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape.order):
        g = grads.get(id(t))
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        node = t._node
        if node is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return tape
