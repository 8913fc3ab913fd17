"""Dense float64 tensor helpers and a platform-stable random generator.

Tensors are plain :class:`numpy.ndarray` values.  The helpers here add the
checks the rest of the package relies on: explicit shape errors, no silent
NaN/Inf, and no division by zero.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operation is undefined for the given input (empty axis, zero divisor)."""


class NonFiniteError(FloatingPointError):
    """A library operation produced NaN or Inf."""


def as_tensor(values, dtype=DTYPE) -> np.ndarray:
    t = np.array(values, dtype=dtype)
    check_finite(t)
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def reduce(t: np.ndarray, axis: int, kind: str = "sum") -> np.ndarray:
    """Reduce along ``axis`` with ``kind`` in {"sum", "mean", "sqnorm"}."""
    t = np.asarray(t, dtype=DTYPE)
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")
    if t.shape[axis] == 0:
        raise DomainError("cannot reduce over an empty axis")
    if kind == "sum":
        out = t.sum(axis=axis)
    elif kind == "mean":
        out = t.sum(axis=axis) / t.shape[axis]
    elif kind == "sqnorm":
        out = (t * t).sum(axis=axis)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return check_finite(out, f"{kind} result")


def _binary_operands(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _binary_operands(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a + b
    return check_finite(out)


def sub(a, b):
    a, b = _binary_operands(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a - b
    return check_finite(out)


def mul(a, b):
    a, b = _binary_operands(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * b
    return check_finite(out)


def div(a, b):
    a, b = _binary_operands(a, b)
    if np.any(b == 0):
        raise DomainError("division by zero")
    with np.errstate(over="ignore"):
        out = a / b
    return check_finite(out)


def scale(t, c: float):
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(t, dtype=DTYPE) * float(c)
    return check_finite(out)


def tanh(t):
    return np.tanh(np.asarray(t, dtype=DTYPE))


def leaky_relu(t, alpha: float = 0.01):
    t = np.asarray(t, dtype=DTYPE)
    return np.where(t > 0, t, alpha * t)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "tanh": tanh, "leaky_relu": leaky_relu,
}


def elementwise(t, f: str, *args, **kwargs):
    """Dispatch an elementwise op by name, e.g. ``elementwise(x, "scale", 0.5)``."""
    try:
        op = _ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise op {f!r}") from None
    return op(t, *args, **kwargs)


def reshape(t: np.ndarray, shape) -> np.ndarray:
    t = np.asarray(t, dtype=DTYPE)
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}")
    return t.reshape(shape)


class Rng:
    """Seeded generator backed by Philox, a counter-based bit generator.

    Philox output depends only on (key, counter), so streams are identical
    across platforms for a given seed.
    """

    def __init__(self, seed: int, *stream):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *stream) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, size, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
