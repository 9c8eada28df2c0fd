"""Small deterministic numeric kernel shared by every other module.

Tensors are plain 2-D numpy arrays. Every learned matrix lives in a
:class:`Parameter`, which carries its own gradient accumulator and ADAM
moments. Gradients accumulate with ``+=`` and are only cleared by
:func:`adam_step` (or an explicit :meth:`Parameter.zero_grad`).

Random numbers come from :func:`make_rng`, a numpy ``Generator`` over the
PCG64 bit generator. PCG64 has a fixed, documented algorithm, so a given
seed yields the same stream on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded from an unsigned 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_tensor2d(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D tensor, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return (da, db) for ``out = a @ b`` given ``dout``."""
    return dout @ b.T, a.T @ dout


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and is a single ufunc pass
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(y: np.ndarray, kind: str) -> np.ndarray:
    """Local derivative expressed through the activation output ``y``."""
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y * y
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows_backward(dout: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def _check_distribution(p: np.ndarray, atol: float = 1e-5) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise ValueError(f"probabilities must sum to 1, got {sums}")


def sample_categorical(p, rng: np.random.Generator) -> int:
    """Draw one index with probability ``p[i]`` (inverse-CDF on one uniform)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    _check_distribution(p)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def sample_categorical_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise version of :func:`sample_categorical`; one uniform per row."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        if self.value.ndim != 2:
            raise ShapeError(f"parameter {self.name} must be 2-D, got {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(param: Parameter, lr: float = 4e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Parameter:
    """One bias-corrected ADAM update in place; clears the gradient."""
    g = param.grad
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1.0 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1.0 - beta2) * g * g
    m_hat = param.adam_m / (1.0 - beta1 ** t)
    v_hat = param.adam_v / (1.0 - beta2 ** t)
    param.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype)
    param.zero_grad()
    return param


def finite_diff_gradcheck(f: Callable[[], float], params: Iterable[Parameter],
                          epsilon: float = 1e-6,
                          loss_only: Callable[[], float] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` evaluates the scalar loss and accumulates analytic gradients into
    ``params`` as a side effect. ``loss_only``, if given, must compute the
    same loss without gradients and is used for the perturbed evaluations.
    Every entry of every parameter is perturbed. Gradients are left zeroed
    on return.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    base = f()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    if f() != base:
        raise DeterminismError("loss function gave different values on identical inputs")
    evaluate = loss_only or f
    if evaluate() != base:
        raise DeterminismError("loss_only disagrees with f at the base point")

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = evaluate()
            flat[i] = old - epsilon
            down = evaluate()
            flat[i] = old
            num = (up - down) / (2.0 * epsilon)
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
        p.zero_grad()
    for p in params:
        p.zero_grad()
    return worst
