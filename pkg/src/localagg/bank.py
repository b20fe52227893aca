"""Memory bank: per-sample running averages of embeddings on the unit sphere."""

from __future__ import annotations

import os

import numpy as np

from . import binio
from .embedding import ZERO_NORM_EPS, normalize_rows
from .errors import DimensionMismatchError, IndexOutOfRangeError, MissingLabelsError

MAGIC = b"LABK"
VERSION = 1


class MemoryBank:
    """N unit rows of dimension D plus optional evaluation labels.

    Labels are kept private and exposed only through :meth:`eval_labels`
    so that training code never touches them.
    """

    def __init__(self, rows: np.ndarray, labels: np.ndarray | None = None, mix: float = 0.5):
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 2:
            raise DimensionMismatchError(f"bank rows must have shape (N>=1, D>=2), got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("bank rows must be unit vectors")
        self.rows = rows
        self._labels = None
        if labels is not None:
            self.set_eval_labels(labels)
        self.mix = float(mix)
        self.skipped_updates = 0

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def eval_labels(self) -> np.ndarray:
        if self._labels is None:
            raise MissingLabelsError("memory bank carries no labels")
        return self._labels

    def set_eval_labels(self, labels) -> None:
        labels = np.asarray(labels)
        if labels.shape != (self.n,) or (labels.size and labels.min() < 0):
            raise ValueError(f"labels must be {self.n} non-negative integers")
        self._labels = labels.astype(np.int64)

    def snapshot(self) -> np.ndarray:
        """Read-only copy of the row matrix for neighbor search and clustering."""
        snap = self.rows.copy()
        snap.flags.writeable = False
        return snap

    def copy(self) -> "MemoryBank":
        out = MemoryBank.__new__(MemoryBank)
        out.rows = self.rows.copy()
        out._labels = None if self._labels is None else self._labels.copy()
        out.mix = self.mix
        out.skipped_updates = self.skipped_updates
        return out

    def update_rows(self, indices, features, t: float | None = None) -> "MemoryBank":
        """Mix ``features`` into the rows at ``indices`` in place and renormalize.

        A row whose mixture has (near) zero norm is left unchanged and counted
        in ``skipped_updates``.
        """
        t = self.mix if t is None else float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {t}")
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape != (indices.size, self.dim):
            raise DimensionMismatchError(
                f"expected features of shape ({indices.size}, {self.dim}), got {features.shape}"
            )
        if indices.size and (indices.min() < 0 or indices.max() >= self.n):
            raise IndexOutOfRangeError(f"update indices outside [0, {self.n})")
        if np.unique(indices).size != indices.size:
            raise ValueError("duplicate indices in a single update")
        if t == 0.0:
            return self
        mixed = (1.0 - t) * self.rows[indices] + t * features
        norms = np.linalg.norm(mixed, axis=1)
        ok = norms >= ZERO_NORM_EPS
        self.skipped_updates += int(np.count_nonzero(~ok))
        self.rows[indices[ok]] = mixed[ok] / norms[ok, None]
        return self

    def save(self, path: str | os.PathLike) -> None:
        save_bank(self, path)


def init_random(n: int, dim: int, seed: int, mix: float = 0.5) -> MemoryBank:
    """Bank of ``n`` independent uniformly distributed unit vectors."""
    if n < 1 or dim < 2:
        raise ValueError(f"need N >= 1 and D >= 2, got N={n}, D={dim}")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, dim))
    while True:
        norms = np.linalg.norm(rows, axis=1)
        bad = norms < ZERO_NORM_EPS
        if not bad.any():
            break
        rows[bad] = rng.standard_normal((int(bad.sum()), dim))
    return MemoryBank(normalize_rows(rows), mix=mix)


def save_bank(bank: MemoryBank, path: str | os.PathLike) -> None:
    """Write the little-endian ``LABK`` format; rows are stored as float32."""
    with open(path, "wb") as fh:
        binio.write_header(fh, MAGIC, VERSION)
        binio.write_u32(fh, bank.n, bank.dim)
        binio.write_u8(fh, 1 if bank.has_labels else 0)
        binio.write_array(fh, bank.rows, "<f4")
        if bank.has_labels:
            binio.write_array(fh, bank.eval_labels(), "<u4")


def load_bank(path: str | os.PathLike, mix: float = 0.5) -> MemoryBank:
    with open(path, "rb") as fh:
        binio.read_header(fh, MAGIC, VERSION)
        n = binio.read_u32(fh)
        dim = binio.read_u32(fh)
        has_labels = binio.read_u8(fh)
        rows = binio.read_array(fh, n * dim, "<f4").reshape(n, dim)
        labels = binio.read_array(fh, n, "<u4") if has_labels else None
        binio.expect_eof(fh)
    bank = MemoryBank.__new__(MemoryBank)
    # float32 storage: keep the stored values exactly instead of renormalizing
    bank.rows = rows.astype(np.float64)
    bank._labels = None if labels is None else labels.astype(np.int64)
    bank.mix = mix
    bank.skipped_updates = 0
    return bank

