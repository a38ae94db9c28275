"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Frobenius norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of ``f`` w.r.t. ``x`` by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
             h: float = 1e-5, wrt: Sequence[int] | None = None) -> float:
    """Worst relative error of ``fn``'s gradient over the inputs in ``wrt``.

    The output is contracted with a fixed random tensor so every Jacobian
    entry contributes.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    T.backward(T.tsum(T.mul(out, Tensor(weights))))

    def value() -> float:
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(analytic, numeric_grad(value, arrays[i], h)))
    return worst


def check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Relative error per named parameter for a scalar loss closure."""
    for p in params.values():
        p.zero_grad()
    T.backward(loss_fn())

    def value() -> float:
        with T.no_grad():
            return loss_fn().item()

    out = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = rel_error(analytic, numeric_grad(value, p.data, h))
    return out
