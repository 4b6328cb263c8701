"""Finite-difference gradient checking.

Independent of the autodiff engine's own derivative code: the oracle only
calls the forward path, perturbing one input element at a time with central
differences. Used by the test suite to certify every differentiable op.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


def numeric_grads(
    fn: Callable[..., Tensor],
    args: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradients of a scalar-valued fn w.r.t. each arg."""
    grads = []
    for i, base in enumerate(args):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        work = [np.array(a, dtype=np.float64) for a in args]
        for j in range(base.size):
            orig = work[i].reshape(-1)[j]
            work[i].reshape(-1)[j] = orig + h
            hi = float(fn(*[Tensor(a) for a in work]).data)
            work[i].reshape(-1)[j] = orig - h
            lo = float(fn(*[Tensor(a) for a in work]).data)
            work[i].reshape(-1)[j] = orig
            flat[j] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def tape_grads(fn: Callable[..., Tensor], args: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients of a scalar-valued fn from one recorded backward pass."""
    tensors = [Tensor(np.array(a, dtype=np.float64)) for a in args]
    with Tape() as tape:
        out = fn(*tensors)
        tape.backward(out)
    return [
        t.grad if t.grad is not None else np.zeros_like(t.data)
        for t in tensors
    ]


def max_relative_error(
    fn: Callable[..., Tensor],
    args: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Worst |analytic - numeric| / (max|numeric| + tiny) over all inputs."""
    analytic = tape_grads(fn, args)
    numeric = numeric_grads(fn, args, h=h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.abs(gn).max() + 1e-8
        worst = max(worst, float(np.abs(ga - gn).max() / denom))
    return worst
