"""Dense numerics: layers with explicit forward/backward passes and a
central-difference gradient checker.

Matrices are 2-D float64 numpy arrays. Row-wise products go through
``rowwise_matmul`` (a non-BLAS einsum) so that each output row depends
only on its own input row, bit for bit; BLAS blocks rows differently
depending on the batch height.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BatchTooSmallError, NumericError, ShapeError, StateError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


def as_matrix(x, cols: int | None = None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {a.shape[1]}")
    return a


def rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", x, w)


class DenseLayer:
    """Affine map ``x @ weight + bias``.

    Gradients from the last ``backward`` are kept in ``grad_weight`` and
    ``grad_bias``.
    """

    def __init__(self, weight, bias=None):
        self.weight = as_matrix(weight)
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64).reshape(-1)
            if bias.shape[0] != self.weight.shape[1]:
                raise ShapeError("bias length must equal weight out_dim")
        self.bias = bias
        self.cached_input: np.ndarray | None = None
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = None if bias is None else np.zeros_like(bias)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        limit = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(w, np.zeros(out_dim) if bias else None)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, self.in_dim)
        self.cached_input = x
        out = rowwise_matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, grad_out) -> np.ndarray:
        if self.cached_input is None:
            raise StateError("dense backward called without a cached forward")
        grad_out = as_matrix(grad_out, self.out_dim)
        x = self.cached_input
        if grad_out.shape[0] != x.shape[0]:
            raise ShapeError("grad_out rows do not match cached input rows")
        self.grad_weight = x.T @ grad_out
        if self.bias is not None:
            self.grad_bias = grad_out.sum(axis=0)
        return rowwise_matmul(grad_out, self.weight.T)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return layer.forward(x)


class Activation:
    """Elementwise nonlinearity selected by name."""

    NAMES = ("relu", "leaky_relu", "tanh", "identity")

    def __init__(self, name: str = "relu", slope: float = 0.01):
        if name not in self.NAMES:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self.slope = slope
        self._cache: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            self._cache = x > 0
            return np.where(self._cache, x, 0.0)
        if self.name == "leaky_relu":
            self._cache = x > 0
            return np.where(self._cache, x, self.slope * x)
        if self.name == "tanh":
            y = np.tanh(x)
            self._cache = y
            return y
        self._cache = None
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.name == "identity":
            return grad_out
        if self._cache is None:
            raise StateError("activation backward called without a cached forward")
        if self.name == "relu":
            return np.where(self._cache, grad_out, 0.0)
        if self.name == "leaky_relu":
            return np.where(self._cache, grad_out, self.slope * grad_out)
        return grad_out * (1.0 - self._cache**2)


@dataclass
class _BNCache:
    centered: np.ndarray
    inv_std: np.ndarray
    normalized: np.ndarray
    frozen: bool = False


class BatchNormLayer:
    """Per-column batch normalization over the rows of a batch.

    Train mode normalizes with the batch mean and *biased* variance and
    updates the running statistics; eval mode uses the running statistics
    and treats every row independently.
    """

    def __init__(self, dim: int, eps: float = DEFAULT_EPS, affine: bool = False,
                 momentum: float = DEFAULT_MOMENTUM):
        if dim < 1:
            raise ShapeError("dim must be >= 1")
        if not eps > 0:
            raise ValueError("eps must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.dim = dim
        self.eps = float(eps)
        self.affine = affine
        self.momentum = float(momentum)
        self.gamma = np.ones(dim) if affine else None
        self.beta = np.zeros(dim) if affine else None
        self.grad_gamma = np.zeros(dim) if affine else None
        self.grad_beta = np.zeros(dim) if affine else None
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.cache: _BNCache | None = None

    def forward_train(self, h) -> np.ndarray:
        h = as_matrix(h, self.dim)
        b = h.shape[0]
        if b < 2:
            raise BatchTooSmallError("train-mode batch norm needs at least 2 rows")
        mu = h.mean(axis=0)
        centered = h - mu
        var = (centered**2).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        normalized = centered * inv_std
        self.cache = _BNCache(centered, inv_std, normalized)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mu
        self.running_var = (1.0 - m) * self.running_var + m * var
        if self.affine:
            return normalized * self.gamma + self.beta
        return normalized

    def forward_eval(self, h) -> np.ndarray:
        h = as_matrix(h, self.dim)
        out = (h - self.running_mean) / np.sqrt(self.running_var + self.eps)
        if self.affine:
            out = out * self.gamma + self.beta
        return out

    def forward_frozen(self, h) -> np.ndarray:
        """Eval-mode statistics with a cache for ``backward``.

        Used for training steps on batches too small for batch statistics.
        """
        h = as_matrix(h, self.dim)
        centered = h - self.running_mean
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        normalized = centered * inv_std
        self.cache = _BNCache(centered, inv_std, normalized, frozen=True)
        if self.affine:
            return normalized * self.gamma + self.beta
        return normalized

    def backward(self, grad_out) -> np.ndarray:
        """Gradient w.r.t. the pre-normalization batch.

        Sum of a direct path through 1/sqrt(var + eps), a path through the
        batch variance and a path through the batch mean.
        """
        if self.cache is None:
            raise StateError("batch-norm backward called without a train-mode forward")
        c = self.cache
        grad_out = as_matrix(grad_out, self.dim)
        if grad_out.shape != c.normalized.shape:
            raise ShapeError("grad_out shape does not match the cached batch")
        b = grad_out.shape[0]
        if self.affine:
            self.grad_gamma = (grad_out * c.normalized).sum(axis=0)
            self.grad_beta = grad_out.sum(axis=0)
            g = grad_out * self.gamma
        else:
            g = grad_out
        if c.frozen:
            return g * c.inv_std
        grad_var = -0.5 * (g * c.centered).sum(axis=0) * c.inv_std**3
        # the variance's own dependence on the mean sums to zero over the batch
        grad_mu = -(g * c.inv_std).sum(axis=0)
        return g * c.inv_std + grad_var * 2.0 * c.centered / b + grad_mu / b


def bn_forward_train(layer: BatchNormLayer, h) -> np.ndarray:
    return layer.forward_train(h)


def bn_forward_eval(layer: BatchNormLayer, h) -> np.ndarray:
    return layer.forward_eval(h)


def bn_backward(layer: BatchNormLayer, grad_out) -> np.ndarray:
    return layer.backward(grad_out)


class LayerNormLayer:
    """Per-row normalization across features; no affine, no running state."""

    def __init__(self, dim: int, eps: float = DEFAULT_EPS):
        if dim < 1:
            raise ShapeError("dim must be >= 1")
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.dim = dim
        self.eps = float(eps)
        self.cache: _BNCache | None = None

    def forward(self, h) -> np.ndarray:
        h = as_matrix(h, self.dim)
        centered = h - h.mean(axis=1, keepdims=True)
        var = (centered**2).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        normalized = centered * inv_std
        self.cache = _BNCache(centered, inv_std, normalized)
        return normalized

    def backward(self, grad_out) -> np.ndarray:
        if self.cache is None:
            raise StateError("layer-norm backward called without a cached forward")
        c = self.cache
        grad_out = as_matrix(grad_out, self.dim)
        if grad_out.shape != c.normalized.shape:
            raise ShapeError("grad_out shape does not match the cached batch")
        d = self.dim
        grad_var = -0.5 * (grad_out * c.centered).sum(axis=1, keepdims=True) * c.inv_std**3
        grad_mu = -(grad_out * c.inv_std).sum(axis=1, keepdims=True)
        return grad_out * c.inv_std + grad_var * 2.0 * c.centered / d + grad_mu / d


def ln_forward(layer: LayerNormLayer, h) -> np.ndarray:
    return layer.forward(h)


def ln_backward(layer: LayerNormLayer, grad_out) -> np.ndarray:
    return layer.backward(grad_out)


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    passed: bool


def numeric_gradient(f: Callable[[np.ndarray], float], params, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_x.size):
        orig = flat_x[j]
        flat_x[j] = orig + step
        fp = float(f(x))
        flat_x[j] = orig - step
        fm = float(f(x))
        flat_x[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {j}")
        flat_g[j] = (fp - fm) / (2.0 * step)
    return grad


def compare_gradients(analytic, numeric, tol: float, atol: float = 1e-6) -> GradCheckReport:
    """Elementwise relative difference; near zero the denominator is floored at ``atol``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ShapeError("analytic and numeric gradients differ in size")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
        raise NumericError("non-finite gradient")
    if a.size == 0:
        return GradCheckReport(0.0, 0.0, True)
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    max_rel = float(np.max(diff / scale))
    return GradCheckReport(float(diff.max()), max_rel, max_rel < tol)


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], params, tol: float = 1e-5,
               step: float = 1e-6, atol: float = 1e-6) -> GradCheckReport:
    """Check ``f``'s analytic gradient against central differences.

    ``f(params)`` must return ``(value, gradient)`` with the gradient shaped
    like ``params``.
    """
    params = np.asarray(params, dtype=np.float64)
    value, analytic = f(params.copy())
    if not np.isfinite(value):
        raise NumericError("non-finite function value at the base point")
    numeric = numeric_gradient(lambda p: f(p)[0], params, step)
    return compare_gradients(analytic, numeric, tol, atol)
