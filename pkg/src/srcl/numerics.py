"""Dense array kernels, seeded random streams and finite-difference checks.

Tensors throughout the package are plain ``numpy.ndarray`` objects. Model
state is float32; reductions and finite differences accumulate in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(a: np.ndarray) -> np.ndarray:
    """Divide every row by its Euclidean norm.

    Rows whose norm is below 1e-12 are returned unchanged, so an all-zero row
    stays all-zero instead of turning into NaNs.
    """
    a = np.asarray(a)
    norms = np.sqrt(np.sum(a.astype(np.float64) ** 2, axis=1, keepdims=True))
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return (a / safe).astype(a.dtype, copy=False)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(
        1e-8, np.abs(analytic) + np.abs(numeric)
    )


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_relative_error <= tol


def check_gradients(
    f: Callable[[Mapping[str, np.ndarray]], float],
    inputs: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes a dict of named arrays; each entry of ``analytic`` is checked by
    perturbing the matching input while holding the others fixed.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    errors = {}
    for name, grad in analytic.items():

        def partial(x, name=name):
            args = dict(base)
            args[name] = x
            return f(args)

        numeric = finite_difference_grad(partial, base[name], h)
        err = relative_error(grad, numeric)
        errors[name] = float(err.max()) if err.size else 0.0
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(worst, errors)


def _derive_key(seed: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RandomStream:
    """Counter-based random stream keyed by a seed and a path of labels.

    ``split`` derives an independent child stream from a label path, so
    ``RandomStream(3).split("augment", epoch, index)`` yields the same draws
    no matter how many other streams were consumed before it.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def split(self, *labels) -> "RandomStream":
        return RandomStream(self.seed, self.path + labels)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={self.path!r})"
