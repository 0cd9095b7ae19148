"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


class NondeterminismError(RuntimeError):
    pass


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _pick(size: int, max_elems: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_elems is None or size <= max_elems:
        return np.arange(size)
    return np.sort(rng.choice(size, max_elems, replace=False))


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-5,
               max_elems: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar tensor.  Analytic gradients are taken
    at the inputs' own precision; the finite-difference side evaluates ``f``
    with the inputs promoted to float64.  ``max_elems`` caps the number of
    coordinates probed per input (sampled with ``seed``).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    loss = f(*inputs)
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    originals = [t.data for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t in inputs:
            t.data = t.data.astype(np.float64)
        with no_grad():
            base = [float(f(*inputs).data) for _ in range(2)]
            if base[0] != base[1]:
                raise NondeterminismError(f"f is not deterministic: {base[0]!r} != {base[1]!r}")
            for t, ana in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                for i in _pick(flat.size, max_elems, rng):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = float(f(*inputs).data)
                    flat[i] = orig - eps
                    down = float(f(*inputs).data)
                    flat[i] = orig
                    num = (up - down) / (2.0 * eps)
                    worst = max(worst, float(rel_err(ana.reshape(-1)[i], num)))
    finally:
        for t, orig in zip(inputs, originals):
            t.data = orig
            t.grad = None
    return worst
