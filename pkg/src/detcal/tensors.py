"""Minimal dense tensor type and the handful of array ops the toolkit needs.

Backed by float64 numpy arrays; the public surface is deliberately small:
construction with explicit shape + flat row-major data, cross-layer variance,
elementwise map/multiply, row means, sigmoid and softmax. Tensors are immutable
once constructed and every operation returns a fresh tensor, so they are safe
to share across workers.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Sequence

import numpy as np

# Centralized tolerances: algebraic identities vs external numeric references.
ALGEBRAIC_TOL = 1e-12
NUMERIC_TOL = 1e-6


class Tensor:
    """Dense N-dimensional array of 64-bit reals in row-major order."""

    __slots__ = ("_array",)

    def __init__(self, shape: Sequence[int], data: Sequence[float]):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"tensor extents must be positive, got {shape}")
        arr = np.array(data, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != math.prod(shape):
            raise ValueError(
                f"shape {shape} needs {math.prod(shape)} elements, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr = arr.reshape(shape)
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Tensor":
        return cls(array.shape, np.asarray(array, dtype=np.float64).ravel())

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> list[float]:
        """Flat row-major copy of the elements."""
        return self._array.ravel().tolist()

    @property
    def array(self) -> np.ndarray:
        """Read-only numpy view (float64)."""
        return self._array

    def to_json(self) -> str:
        return json.dumps({"shape": list(self.shape), "data": self.data})

    @classmethod
    def from_json(cls, text: str) -> "Tensor":
        obj = json.loads(text)
        return cls(obj["shape"], obj["data"])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def __hash__(self):
        raise TypeError("Tensor is not hashable")


def variance_along_first_axis(t: Tensor, sample: bool = False) -> Tensor:
    """Per-position variance of t over its first axis.

    Population variance (divide by L) by default; ``sample=True`` divides by
    L-1 instead. Requires at least two entries along the first axis.
    """
    arr = t.array
    layers = arr.shape[0]
    if layers < 2:
        raise ValueError("insufficient layers for variance")
    mean = arr.mean(axis=0)
    sq = (arr - mean) ** 2
    denom = layers - 1 if sample else layers
    var = sq.sum(axis=0) / denom
    # -0.0 and tiny negative rounding never survive: clamp at exact zero.
    return Tensor.from_array(np.maximum(var, 0.0))


def elementwise_map(t: Tensor, f: Callable[[float], float]) -> Tensor:
    out = np.vectorize(f, otypes=[np.float64])(t.array)
    return Tensor.from_array(out)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Tensor.from_array(a.array * b.array)


def mean_over_rows(rows: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of equal-length 1-D tensors, component by component."""
    if not rows:
        raise ValueError("no positive queries")
    length = rows[0].shape
    for r in rows:
        if r.shape != length:
            raise ValueError(f"row length mismatch: {r.shape} vs {length}")
    stacked = np.stack([r.array for r in rows])
    return Tensor.from_array(stacked.mean(axis=0))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    return Tensor.from_array(sigmoid_array(t.array))


def softmax_last_axis(t: Tensor) -> Tensor:
    arr = t.array
    shifted = arr - arr.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return Tensor.from_array(ex / ex.sum(axis=-1, keepdims=True))
