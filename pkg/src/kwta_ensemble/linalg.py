"""Dense float64 helpers and seeded random streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, batch-major.
Random streams come from numpy's PCG64 bit generator so that a given seed
reproduces the same draws on every platform numpy supports.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "PRNG_ALGORITHM",
    "as_matrix",
    "make_rng",
    "spawn_rngs",
    "matmul",
    "uniform",
    "argmax_row",
    "argmax_rows",
]

# Recorded in run records so results can be traced to the generator that made them.
PRNG_ALGORITHM = f"PCG64/numpy-{np.__version__}"


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array (a 1-D input becomes one row)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[np.newaxis, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed.

    Children do not share draw order, so consumers of one stream (say the
    batch shuffler) never shift the draws seen by another (parameter init).
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [make_rng(child) for child in children]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def uniform(rng: np.random.Generator, lo: float, hi: float, rows: int, cols: int) -> np.ndarray:
    """I.i.d. draws on ``[lo, hi)``."""
    if not lo < hi:
        raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
    return rng.uniform(lo, hi, size=(rows, cols))


def argmax_row(m: np.ndarray, row: int) -> int:
    """Column of the row maximum; ties go to the lowest index."""
    m = as_matrix(m)
    if not 0 <= row < m.shape[0]:
        raise IndexError(f"row {row} out of range for {m.shape[0]} rows")
    if m.shape[1] < 1:
        raise ShapeError("argmax of an empty row")
    # np.argmax returns the first occurrence of the maximum.
    return int(np.argmax(m[row]))


def argmax_rows(m: np.ndarray) -> np.ndarray:
    """Vectorised :func:`argmax_row` over every row."""
    return np.argmax(as_matrix(m), axis=1)
