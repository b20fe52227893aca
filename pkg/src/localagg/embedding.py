"""Unit-sphere embedding arithmetic and the non-parametric softmax.

Every probability here is defined against the rows of a memory bank:
``P(i | v) = exp(bank_i . v / tau) / sum_j exp(bank_j . v / tau)``.
The denominator is evaluated exactly over all rows.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import DimensionMismatchError, IndexOutOfRangeError, ZeroNormError

DEFAULT_TAU = 0.07
BLOCK_ROWS = 64
ZERO_NORM_EPS = 1e-12


def as_rows(bank) -> np.ndarray:
    """Return the (N, D) row matrix of a MemoryBank or a plain array."""
    rows = getattr(bank, "rows", bank)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DimensionMismatchError(f"bank must be a nonempty (N, D) matrix, got shape {rows.shape}")
    return rows


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"temperature must lie in (0, 1], got {tau}")
    return tau


def normalize(z) -> np.ndarray:
    """Project ``z`` onto the unit sphere.

    Raises ZeroNormError when ``||z|| < 1e-12``; that almost always means
    the encoder produced a degenerate output.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise DimensionMismatchError(f"embedding needs D >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("embedding has non-finite entries")
    norm = np.linalg.norm(z)
    if norm < ZERO_NORM_EPS:
        raise ZeroNormError(f"cannot normalize vector with norm {norm:.3g}")
    return z / norm


def normalize_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`normalize` for (B, D) batches."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNormError("batch contains a row with (near) zero norm")
    return z / norms


def similarity_row(v, bank, block: int = BLOCK_ROWS) -> np.ndarray:
    """Dot products of ``v`` against every bank row, computed in row blocks."""
    rows = as_rows(bank)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (rows.shape[1],):
        raise DimensionMismatchError(f"query has shape {v.shape}, bank rows have D={rows.shape[1]}")
    out = np.empty(rows.shape[0])
    for start in range(0, rows.shape[0], block):
        stop = start + block
        out[start:stop] = rows[start:stop] @ v
    return out


def similarity_matrix(queries: np.ndarray, bank, block: int = BLOCK_ROWS) -> np.ndarray:
    """(B, N) dot products of a batch of queries against the bank."""
    rows = as_rows(bank)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != rows.shape[1]:
        raise DimensionMismatchError(f"queries have D={queries.shape[1]}, bank rows have D={rows.shape[1]}")
    out = np.empty((queries.shape[0], rows.shape[0]))
    for start in range(0, rows.shape[0], block):
        stop = start + block
        out[:, start:stop] = queries @ rows[start:stop].T
    return out


def logsumexp(x: np.ndarray, axis=None, where=None) -> np.ndarray:
    """Max-shifted log-sum-exp; masked entries (``where=False``) are ignored."""
    x = np.asarray(x, dtype=np.float64)
    if where is None:
        m = np.max(x, axis=axis, keepdims=True)
        s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    else:
        m = np.max(x, axis=axis, keepdims=True, initial=-np.inf, where=where)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.sum(np.exp(x - m), axis=axis, keepdims=True, where=where)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m
    if axis is None:
        return out.reshape(())[()]
    return np.squeeze(out, axis=axis)


def log_probs(v, bank, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Log of the instance probabilities of ``v`` for every bank row."""
    logits = similarity_row(v, bank) / check_tau(tau)
    return logits - logsumexp(logits)


def _check_index(i: int, n: int) -> int:
    if not 0 <= int(i) < n:
        raise IndexOutOfRangeError(f"index {i} outside [0, {n})")
    return int(i)


def instance_prob(i: int, v, bank, tau: float = DEFAULT_TAU) -> float:
    """Probability that ``v`` is recognized as bank row ``i``."""
    rows = as_rows(bank)
    i = _check_index(i, rows.shape[0])
    return float(np.exp(log_probs(v, rows, tau)[i]))


def index_set(indices: Iterable[int], n: int | None = None) -> np.ndarray:
    """Sorted, deduplicated int64 index array, optionally range-checked against ``n``."""
    idx = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64))
    if n is not None and idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise IndexOutOfRangeError(f"index set has entries outside [0, {n})")
    return idx


def set_prob(indices, v, bank, tau: float = DEFAULT_TAU) -> float:
    """Probability mass of the index set ``indices`` under the instance softmax."""
    rows = as_rows(bank)
    idx = index_set(indices, rows.shape[0])
    if idx.size == 0:
        return 0.0
    lp = log_probs(v, rows, tau)
    return float(np.exp(logsumexp(lp[idx])))
