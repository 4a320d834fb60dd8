"""Dense float64 arithmetic, activations, BCE and hand-written layer backwards.

Every trainable array lives in a :class:`Parameter`. Layers cache what their
backward pass needs during ``forward``; calling ``backward`` without a
preceding ``forward`` raises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, ProbeError

BCE_EPS = 1e-12
DEFAULT_SLOPE = 0.2


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def leaky_relu(x, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_grad(x, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, slope)


def sigmoid(x) -> np.ndarray:
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def bce_loss(pred, target, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy over all entries, with predictions clamped to [eps, 1-eps]."""
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    terms = target * np.log(p) + (1.0 - target) * np.log1p(-p)
    return float(-terms.mean())


def bce_grad(pred, target, eps: float = BCE_EPS) -> np.ndarray:
    """Gradient of :func:`bce_loss` with respect to ``pred``; zero where the clamp is active."""
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    g = (p - target) / (p * (1.0 - p)) / pred.size
    inside = (pred > eps) & (pred < 1.0 - eps)
    return np.where(inside, g, 0.0)


def bce_with_logits(logits, target) -> float:
    """``bce_loss(sigmoid(logits), target)`` evaluated stably from the logits.

    Agrees with the clamped form wherever ``sigmoid(logits)`` stays inside
    [eps, 1-eps]; past that it keeps growing linearly instead of flattening.
    """
    s = as_matrix(logits)
    t = as_matrix(target)
    if s.shape != t.shape:
        raise DimensionError(f"logit shape {s.shape} != target shape {t.shape}")
    softplus = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    return float((softplus - t * s).mean())


def bce_with_logits_grad(logits, target) -> np.ndarray:
    s = as_matrix(logits)
    t = as_matrix(target)
    if s.shape != t.shape:
        raise DimensionError(f"logit shape {s.shape} != target shape {t.shape}")
    return (sigmoid(s) - t) / s.size


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_matrix(self.grad).copy()
            if self.grad.shape != self.value.shape:
                raise DimensionError(
                    f"grad shape {self.grad.shape} != value shape {self.value.shape}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    for prm in params:
        if lr != 0.0:
            prm.value -= lr * prm.grad
        prm.zero_grad()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Layer:
    """Forward/backward contract: ``backward`` consumes the cache of the last ``forward``."""

    def __init__(self):
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return []

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Linear(Layer):
    """``y = x @ W + b`` with an optional bias."""

    def __init__(self, weight: Parameter, bias: Parameter | None = None):
        super().__init__()
        self.weight = weight
        self.bias = bias
        if bias is not None and bias.shape != (1, weight.shape[1]):
            raise DimensionError(f"bias shape {bias.shape} does not fit weight {weight.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
             name: str = "") -> "Linear":
        w = Parameter(glorot_uniform(rng, n_in, n_out), name=f"{name}.W" if name else "W")
        b = Parameter(np.zeros((1, n_out)), name=f"{name}.b" if name else "b") if bias else None
        return cls(w, b)

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        y = matmul(x, self.weight.value)
        if self.bias is not None:
            y = y + self.bias.value
        self._cache = x
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self.weight.grad += x.T @ dy
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=0, keepdims=True)
        return dy @ self.weight.value.T


class LeakyReLU(Layer):
    def __init__(self, slope: float = DEFAULT_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._cache = x
        return leaky_relu(x, self.slope)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        return dy * leaky_relu_grad(x, self.slope)


class Sigmoid(Layer):
    def forward(self, x) -> np.ndarray:
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        y = self._take_cache()
        return dy * y * (1.0 - y)


class Identity(Layer):
    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._cache = True
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._take_cache()
        return dy


def make_activation(name: str, slope: float = DEFAULT_SLOPE) -> Layer:
    if name == "leaky_relu":
        return LeakyReLU(slope)
    if name == "sigmoid":
        return Sigmoid()
    if name == "identity":
        return Identity()
    raise ValueError(f"unknown activation {name!r}")


def numerical_gradient(loss_fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``x``, perturbing ``x`` in place.

    ``x`` is restored entry by entry, so ``loss_fn`` may read it through any alias.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"probe step must lie in (0, 1e-3], got {h}")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = loss_fn()
        flat[k] = orig - h
        fm = loss_fn()
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ProbeError(f"non-finite loss while probing entry {k}: f+={fp}, f-={fm}")
        out[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise DimensionError(f"analytic shape {analytic.shape} != numeric shape {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(
    forward_backward: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    h: float = 1e-5,
) -> float:
    """Compare the analytic gradient of a scalar function with central differences.

    ``forward_backward(x)`` must return ``(loss, dloss/dx)``. Returns the maximum
    relative error over all entries of ``x``.
    """
    x = as_matrix(x).copy()
    loss, analytic = forward_backward(x.copy())
    if not np.isfinite(loss):
        raise ProbeError(f"non-finite loss at the probe centre: {loss}")
    probe = x.copy()
    numeric = numerical_gradient(lambda: forward_backward(probe.copy())[0], probe, h)
    return relative_error(np.asarray(analytic).reshape(x.shape), numeric)
