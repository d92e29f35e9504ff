"""Dense float64 matrix helpers, seeded normal sampling and an SPD solver.

Matrices are plain 2-D ``numpy.ndarray`` objects in C (row-major) order with
dtype float64.  The helpers here add the shape and finiteness checks the rest
of the package relies on; the heavy lifting is numpy/LAPACK.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

__all__ = [
    "ConfigurationError",
    "SingularMatrixError",
    "NonFiniteError",
    "SeededRng",
    "as_matrix",
    "matmul",
    "frobenius_norm",
    "frobenius_inner",
    "solve_spd",
    "gaussian_matrix",
    "derive_seed",
]

_UINT64_MASK = (1 << 64) - 1


class ConfigurationError(ValueError):
    """Raised on shape mismatches and invalid arguments."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky met a non-positive pivot.

    ``pivot`` is the 0-based index of the first failing diagonal entry.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class NonFiniteError(FloatingPointError):
    """A result contained NaN or Inf."""


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} produced non-finite entries")
    return x


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 2-D array, optionally reshaping."""
    a = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ConfigurationError("both rows and cols are required when reshaping")
        if a.size != rows * cols:
            raise ConfigurationError(f"cannot view {a.size} values as {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ConfigurationError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _check_finite(out, "matmul")


def frobenius_norm(a: np.ndarray) -> float:
    # np.linalg.norm rescales to avoid overflow; a plain sum of squares is fine
    # for the magnitudes used here and keeps the result reproducible.
    return float(np.sqrt(np.sum(np.square(a))))


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Return ``trace(a.T @ b)`` without forming the product."""
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Unpivoted Cholesky (LAPACK ``potrf``/``potrs``).  Only the lower triangle
    of ``a`` is read.  ``b`` may be a vector or a matrix.

    Raises:
        SingularMatrixError: a leading minor is not positive definite.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"solve_spd needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ConfigurationError(f"right-hand side has {b.shape[0]} rows, expected {a.shape[0]}")
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
        raise NonFiniteError("solve_spd received non-finite input")
    chol, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(info - 1)
    if info < 0:
        raise ConfigurationError(f"dpotrf argument {-info} invalid")
    x, info = lapack.dpotrs(chol, b, lower=1)
    if info != 0:
        raise ConfigurationError(f"dpotrs argument {-info} invalid")
    return _check_finite(x, "solve_spd")


def derive_seed(parent_seed: int, index: int) -> int:
    """Child seed for stream ``index`` of ``parent_seed``.

    ``child = SeedSequence(parent_seed, spawn_key=(index,))`` reduced to one
    64-bit word.  SeedSequence hashing is fixed by numpy's NEP 19 contract, so
    the mapping is stable across platforms.
    """
    if parent_seed < 0 or index < 0:
        raise ConfigurationError("seeds and stream indices must be non-negative")
    ss = np.random.SeedSequence(int(parent_seed) & _UINT64_MASK, spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class SeededRng:
    """PCG64 stream with Box-Muller normals.

    Each normal sample consumes exactly one uniform double (pairs of uniforms
    give pairs of normals; odd requests round up and drop the spare), so the
    position in the stream after any call depends only on the requested sizes.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ConfigurationError("seed must be non-negative")
        self.seed = int(seed) & _UINT64_MASK
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, index))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self._gen.random(2 * pairs)
        # 1 - u lies in (0, 1], so the log is finite.
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        angle = 2.0 * np.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count].reshape(shape)


def gaussian_matrix(
    rng: SeededRng,
    rows: int,
    cols: int,
    mean_row: np.ndarray | None = None,
    std: float = 1.0,
) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. N(0, std^2) entries plus ``mean_row`` on every row."""
    if std < 0:
        raise ConfigurationError("std must be non-negative")
    if rows < 1 or cols < 1:
        raise ConfigurationError("rows and cols must be positive")
    out = std * rng.normal((rows, cols))
    if mean_row is not None:
        mean_row = np.asarray(mean_row, dtype=np.float64).reshape(-1)
        if mean_row.shape[0] != cols:
            raise ConfigurationError(f"mean_row has {mean_row.shape[0]} entries, expected {cols}")
        out = out + mean_row[None, :]
    return out
