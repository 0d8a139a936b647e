"""Deterministic float64 matrix helpers and the seeded RNG substrate.

All numeric state in this package is a 2-D C-contiguous float64 numpy array
(1-D for label and bias vectors). The helpers here pin down the conventions
the rest of the package relies on:

- sign(0) = 0, so a zero gradient leaves a PGD iterate unchanged;
- argmax ties break to the lowest index;
- reductions and products are evaluated by numpy on fixed single-process
  BLAS, so identical inputs give identical bytes from run to run;
- randomness always flows through a PCG64 generator built by ``new_rng``,
  which produces the same stream for the same seed on every platform.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


def new_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded PCG64 generator; same (seed, stream), same draw sequence everywhere.

    ``stream`` jumps the generator to an independent substream so that, e.g.,
    model init and batch shuffling cannot consume each other's draws.
    """
    return np.random.Generator(np.random.PCG64(int(seed)).jumped(int(stream)))


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 C-order array, optionally checking shape."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    check_finite(m)
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} contains non-finite entries")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def relu_grad(m: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0, matching relu's flat side.
    return (m > 0.0).astype(np.float64)


def sign(m: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0, the convention PGD depends on.
    return np.sign(m)


def clamp(m: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(m, lo, hi)


def exp(m: np.ndarray) -> np.ndarray:
    return np.exp(m)


def log(m: np.ndarray) -> np.ndarray:
    if np.any(np.asarray(m) <= 0.0):
        raise ValueError("log requires strictly positive entries")
    return np.log(m)


def _check_axis(m: np.ndarray, axis: int) -> None:
    if axis not in (0, 1):
        raise DimensionError(f"axis must be 0 or 1, got {axis}")
    if m.shape[axis] == 0:
        raise ValueError("cannot reduce over an empty axis")


def reduce_sum(m: np.ndarray, axis: int) -> np.ndarray:
    _check_axis(m, axis)
    return np.sum(m, axis=axis)


def reduce_max(m: np.ndarray, axis: int) -> np.ndarray:
    _check_axis(m, axis)
    return np.max(m, axis=axis)


def reduce_argmax(m: np.ndarray, axis: int) -> np.ndarray:
    """Index of the maximum along an axis; ties break to the lowest index."""
    _check_axis(m, axis)
    return np.argmax(m, axis=axis)
