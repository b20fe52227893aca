"""Synthetic clustered datasets and the ``LADS`` dataset file."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import ConfigError, FormatError

MAGIC = b"LADS"
VERSION = 1
MAX_REJECTIONS = 10_000


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    latent: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("dataset inputs must be a nonempty 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValueError("one label per input row required")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def save(self, path: str | os.PathLike) -> None:
        save_dataset(self, path)


def _sample_centers(rng, classes: int, latent_dim: int, min_angle: float) -> np.ndarray:
    """Centers uniform on the latent sphere, pairwise angles at least ``min_angle``.

    Candidates are drawn one at a time; a candidate too close to an accepted
    center is rejected. If the packing jams, the whole set is redrawn.
    """
    cos_max = np.cos(min_angle)
    rejections = 0
    while True:
        centers: list[np.ndarray] = []
        misses = 0
        while len(centers) < classes:
            c = rng.standard_normal(latent_dim)
            c /= np.linalg.norm(c)
            if all(c @ other <= cos_max for other in centers):
                centers.append(c)
                misses = 0
                continue
            rejections += 1
            misses += 1
            if rejections >= MAX_REJECTIONS:
                raise ConfigError(
                    f"could not place {classes} centers with minimum angle "
                    f"{np.degrees(min_angle):.1f} deg after {MAX_REJECTIONS} rejections"
                )
            if misses >= 200:
                break
        if len(centers) == classes:
            return np.stack(centers)


def generate(classes: int, per_class: int, latent_dim: int, input_dim: int, noise_sigma: float,
             seed: int, min_angle_deg: float = 20.0) -> Dataset:
    """Gaussian clusters around separated latent centers, lifted to ``input_dim``.

    The lift is a fixed seeded random affine map followed by a rectifier.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if per_class < 1:
        raise ConfigError("need at least one sample per class")
    if latent_dim < 2 or input_dim < latent_dim:
        raise ConfigError("need latent_dim >= 2 and input_dim >= latent_dim")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    centers = _sample_centers(rng, classes, latent_dim, np.radians(min_angle_deg))
    labels = np.repeat(np.arange(classes), per_class)
    latent = centers[labels] + noise_sigma * rng.standard_normal((labels.size, latent_dim))
    lift_w = rng.standard_normal((input_dim, latent_dim))
    lift_b = 0.5 * rng.standard_normal(input_dim)
    inputs = np.maximum(latent @ lift_w.T + lift_b, 0.0)
    # stored as float32; keep the in-memory copy identical to what a reload returns
    inputs = inputs.astype(np.float32).astype(np.float64)
    return Dataset(inputs, labels, latent)


def train_val_split(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split by seeded permutation; both parts sorted."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B1])).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        n_val = min(max(n_val, 1), n - 1) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, MAGIC, VERSION)
        binio.write_u32(fh, ds.n, ds.input_dim)
        binio.write_u8(fh, 0 if ds.labels is None else 1)
        binio.write_array(fh, ds.inputs, "<f4")
        if ds.labels is not None:
            binio.write_array(fh, ds.labels, "<u4")


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        binio.read_header(fh, MAGIC, VERSION)
        n = binio.read_u32(fh)
        dim = binio.read_u32(fh)
        has_labels = binio.read_u8(fh)
        inputs = binio.read_array(fh, n * dim, "<f4").reshape(n, dim)
        labels = binio.read_array(fh, n, "<u4") if has_labels else None
        binio.expect_eof(fh)
    if n == 0:
        raise FormatError("dataset file holds no rows")
    return Dataset(inputs.astype(np.float64), labels)
