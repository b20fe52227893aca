"""Weighted kNN classification, linear readout, and local/background density profiles."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .embedding import DEFAULT_TAU, as_rows, check_tau, normalize_rows, similarity_matrix
from .encoder import forward
from .errors import BandOutOfRangeError, LabelMismatchError, MissingLabelsError
from .neighbors import topk_mask

HIST_BINS = 64



def knn_classify_many(queries, bank, k: int, tau: float = DEFAULT_TAU, labels=None):
    """Predicted labels and confidences for a batch of queries.

    Each of the top-``k`` bank rows votes for its label with weight
    ``exp(sim / tau)``; weights are shifted by the per-query maximum, which
    leaves the argmax unchanged. Ties go to the smaller label.
    """
    rows = as_rows(bank)
    if labels is None:
        if not getattr(bank, "has_labels", False):
            raise MissingLabelsError("kNN classification needs a labelled bank")
        labels = bank.eval_labels()
    labels = np.asarray(labels, dtype=np.int64)
    tau = check_tau(tau)
    if not 1 <= k <= rows.shape[0]:
        raise ValueError(f"K must lie in [1, {rows.shape[0]}], got {k}")
    sims = similarity_matrix(queries, rows)
    mask = topk_mask(sims, k)
    logits = sims / tau
    shift = np.max(np.where(mask, logits, -np.inf), axis=1, keepdims=True)
    weights = np.where(mask, np.exp(logits - shift), 0.0)
    n_labels = int(labels.max()) + 1
    votes = np.zeros((sims.shape[0], n_labels))
    for lab in range(n_labels):
        votes[:, lab] = weights[:, labels == lab].sum(axis=1)
    pred = np.argmax(votes, axis=1)
    conf = votes[np.arange(len(pred)), pred] / votes.sum(axis=1)
    return pred, conf


def knn_classify(v, bank, k: int, tau: float = DEFAULT_TAU) -> tuple[int, float]:
    pred, conf = knn_classify_many(np.atleast_2d(v), bank, k, tau)
    return int(pred[0]), float(conf[0])


def knn_accuracy(queries, query_labels, bank, k: int, tau: float = DEFAULT_TAU) -> float:
    pred, _ = knn_classify_many(queries, bank, k, tau)
    return float(np.mean(pred == np.asarray(query_labels)))


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 100, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 1e-4, batch_size: int = 128,
                 seed: int = 0) -> float:
    """Softmax regression on frozen embeddings; returns top-1 test accuracy."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if train_x.shape[0] != train_y.shape[0] or test_x.shape[0] != test_y.shape[0]:
        raise LabelMismatchError("embedding and label counts differ")
    if train_x.shape[1] != test_x.shape[1]:
        raise LabelMismatchError("train and test embeddings have different widths")
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    rng = np.random.default_rng(seed)
    w = np.zeros((n_classes, train_x.shape[1]))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    n = train_x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = train_x[idx] @ w.T + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(idx.size), train_y[idx]] -= 1.0
            p /= idx.size
            vw = momentum * vw + p.T @ train_x[idx] + 2.0 * weight_decay * w
            vb = momentum * vb + p.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    pred = np.argmax(test_x @ w.T + b, axis=1)
    return float(np.mean(pred == test_y))


# --------------------------------------------------------------------------
# density


@dataclass
class DensityProfile:
    local: np.ndarray
    background: np.ndarray
    local_rank: int
    band: tuple[int, int]

    @property
    def mean_local(self) -> float:
        return float(self.local.mean())

    @property
    def mean_background(self) -> float:
        return float(self.background.mean())

    def histogram(self, bins: int = HIST_BINS):
        edges = np.linspace(-1.0, 1.0, bins + 1)
        local_counts, _ = np.histogram(np.clip(self.local, -1, 1), edges)
        back_counts, _ = np.histogram(np.clip(self.background, -1, 1), edges)
        return edges, local_counts, back_counts

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "local_density", "background_density"])
            for i, (lo, bg) in enumerate(zip(self.local, self.background)):
                writer.writerow([i, repr(float(lo)), repr(float(bg))])

    def write_histogram_csv(self, path: str | os.PathLike, bins: int = HIST_BINS) -> None:
        edges, lc, bc = self.histogram(bins)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "local_count", "background_count"])
            for j in range(bins):
                writer.writerow([f"{edges[j]:.6f}", f"{edges[j + 1]:.6f}", int(lc[j]), int(bc[j])])


def default_density_ranks(n: int) -> tuple[int, tuple[int, int]]:
    """Rank bands scaled to the bank size: local top-min(30, N/50), band (N/10, min(4096, N/3))."""
    local = max(1, min(30, n // 50))
    low = max(local + 1, n // 10)
    high = max(low + 1, min(4096, n // 3))
    return local, (low, high)


def density_profile(bank, local_rank: int | None = None, band: tuple[int, int] | None = None,
                    block: int = 512) -> DensityProfile:
    """Mean dot product of each row with its top ``local_rank`` neighbors and
    with its neighbors ranked ``band[0]..band[1]`` (1-based, self excluded)."""
    rows = as_rows(bank)
    n = rows.shape[0]
    d_local, d_band = default_density_ranks(n)
    local_rank = d_local if local_rank is None else int(local_rank)
    low, high = d_band if band is None else (int(band[0]), int(band[1]))
    if not (1 <= local_rank <= n - 1) or not (1 <= low < high <= n - 1):
        raise BandOutOfRangeError(f"ranks must satisfy 1 <= low < high <= N-1 = {n - 1}")
    local = np.empty(n)
    background = np.empty(n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        sims = rows[start:stop] @ rows.T
        idx = np.arange(start, stop)
        sims[np.arange(stop - start), idx] = -np.inf
        # descending, ties by index; column 0 holds rank 1
        order = np.argsort(-sims, axis=1, kind="stable")
        ranked = np.take_along_axis(sims, order, axis=1)[:, : n - 1]
        local[start:stop] = ranked[:, :local_rank].mean(axis=1)
        background[start:stop] = ranked[:, low - 1:high].mean(axis=1)
    return DensityProfile(local, background, local_rank, (low, high))


def embed(params, inputs) -> np.ndarray:
    """Unit-norm encoder outputs for a batch of inputs."""
    z, _ = forward(params, inputs)
    return normalize_rows(np.atleast_2d(z))
