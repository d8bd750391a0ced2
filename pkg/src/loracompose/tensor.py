"""Dense float64 matrix helpers and the seeded random source.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
helpers here add the shape checking the rest of the package relies on.

All randomness goes through :func:`make_rng`, which returns a
``numpy.random.Generator`` driven by the PCG64 bit generator. PCG64 is a
fully specified 128-bit permuted congruential generator, so a given seed
yields the same stream on every platform.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray
Rng = np.random.Generator


def make_rng(seed: int | np.random.SeedSequence) -> Rng:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(int(seed)))


def stable_tag(text: str) -> int:
    """32-bit integer derived from ``text``, for mixing names into seeds."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Return ``x`` as a C-contiguous float64 2-D array, or raise ShapeError."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    return a


def frozen(a: Matrix) -> Matrix:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def axpy(alpha: float, x: Matrix, y: Matrix) -> Matrix:
    """alpha * x + y, elementwise."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return float(alpha) * x + y


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"dimensions must be positive, got {rows}x{cols}")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = rng.standard_normal((rows, cols))
    return z * float(std)
