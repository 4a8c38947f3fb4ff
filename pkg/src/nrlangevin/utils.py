"""Shared utility functions."""

import math
import os

import numpy as np

from .constants import CSV_FLOAT_FORMAT, THREADS_ENV_VAR


def matvec(matrix: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply ``matrix`` to every row of ``x`` (shape ``(..., d)``).

    Accumulates column by column with elementwise multiply-adds instead of
    a BLAS product, so each row's result does not depend on how many rows
    are in the batch.  Chains therefore give bit-identical trajectories no
    matter how they are split across workers.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x[..., 0, None] * matrix[:, 0]
    for k in range(1, matrix.shape[1]):
        out = out + x[..., k, None] * matrix[:, k]
    return out


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot product over the last axis, summed in index order."""
    out = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        out = out + a[..., k] * b[..., k]
    return out


def format_float(x: float | None) -> str:
    """Format a float for CSV output; ``None`` and NaN become empty cells."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return CSV_FLOAT_FORMAT % x


def default_threads() -> int:
    """Worker count from ``NRL_THREADS``, falling back to the CPU count."""
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            value = int(env)
        except ValueError:
            value = 0
        if value > 0:
            return value
    return os.cpu_count() or 1
