"""Dense matrix/vector arithmetic, stable nonlinearities, and a seeded RNG.

Conventions used throughout the package:

* A "matrix" is a 2-D ``numpy.ndarray`` of ``float64`` in C (row-major)
  order; a "vector" is a 1-D ``float64`` array.  Row-major order is the
  canonical serialization order everywhere (checkpoints, datasets).
* All arithmetic is double precision.  Finite-difference gradient
  verification relies on this; nothing here may silently downcast.
* Every function is a pure function of its inputs and safe to call
  concurrently.  :class:`SeededRng` is stateful and single-owner.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "SeededRng",
    "matmul",
    "softmax",
    "log_softmax",
    "diag",
    "tanh_ew",
    "sigmoid_ew",
    "hadamard",
    "add",
    "concat",
    "draw_uniform",
    "draw_gaussian",
    "as_vector",
    "as_matrix",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names both."""


def as_vector(x) -> np.ndarray:
    """Coerce to a float64 1-D array (no copy when already conforming)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a vector, got array of shape {arr.shape}")
    return arr


def as_matrix(x) -> np.ndarray:
    """Coerce to a float64 2-D array (no copy when already conforming)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises :class:`ShapeError` naming both shapes when ``a.cols != b.rows``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D x (1|2)-D, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtraction); output sums to 1."""
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / np.sum(e)


def log_softmax(v: np.ndarray) -> np.ndarray:
    """log(softmax(v)) computed without forming small exponentials."""
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("log_softmax of an empty vector")
    shifted = v - np.max(v)
    return shifted - math.log(np.sum(np.exp(shifted)))


def diag(v: np.ndarray) -> np.ndarray:
    """Square matrix with ``v`` on the diagonal, zeros elsewhere."""
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("diag of an empty vector")
    return np.diag(v)


def tanh_ew(v: np.ndarray) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(np.asarray(v, dtype=np.float64))


def sigmoid_ew(v: np.ndarray) -> np.ndarray:
    """Elementwise logistic sigmoid, stable for inputs out to +/-700.

    Two-branch form, 1/(1+exp(-x)) for x >= 0 and exp(x)/(1+exp(x))
    otherwise, sharing one exp(-|x|) so nothing ever overflows.
    """
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two same-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two same-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenation of two vectors; result dim = a.dim + b.dim."""
    return np.concatenate([as_vector(a), as_vector(b)])


class SeededRng:
    """Deterministic random source: PCG64 stream keyed by a 64-bit seed.

    The uniform stream comes straight from numpy's PCG64 bit generator.
    Gaussians are produced by the Box-Muller transform of two uniform
    draws each (u1 mapped into (0, 1] so the log never sees zero), so the
    whole draw sequence is a fixed, documented function of the seed.
    Identical seed and call order reproduce identical sequences across
    runs on the same build.  Never share one instance across concurrent
    tasks.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return lo + (hi - lo) * self._gen.random(n)

    def gaussian(self, mu: float, sigma: float, n: int) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"gaussian requires sigma >= 0, got {sigma}")
        u1 = 1.0 - self._gen.random(n)  # (0, 1]
        u2 = self._gen.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mu + sigma * z

    def randint(self, lo: int, hi: int) -> int:
        """One integer uniform over [lo, hi)."""
        if not lo < hi:
            raise ValueError(f"randint requires lo < hi, got [{lo}, {hi})")
        return int(lo + int(self._gen.random() * (hi - lo)))

    def random(self) -> float:
        """One uniform draw in [0, 1)."""
        return float(self._gen.random())

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by the uniform stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]


def draw_uniform(rng: SeededRng, lo: float, hi: float, n: int) -> np.ndarray:
    """n independent uniform draws in [lo, hi)."""
    return rng.uniform(lo, hi, n)


def draw_gaussian(rng: SeededRng, mu: float, sigma: float, n: int) -> np.ndarray:
    """n independent Gaussian draws (Box-Muller; sigma = 0 gives mu exactly)."""
    return rng.gaussian(mu, sigma, n)
