"""Background and close neighbor identification.

Background neighbors are the ``k`` bank rows most similar to the current
feature (dynamic, recomputed every step). Close neighbors are the union,
over an ensemble of k-means partitions of the bank, of the cluster that
holds the sample's own index.
"""

from __future__ import annotations

import enum
import heapq
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .embedding import BLOCK_ROWS, as_rows, index_set, similarity_row
from .errors import DimensionMismatchError, FormatError, IndexOutOfRangeError

CLUSTER_MAGIC = b"LACL"
CLUSTER_VERSION = 1


class BackgroundMode(str, enum.Enum):
    ALL = "ALL"
    CLUSTER = "CLUSTER"
    KNN = "KNN"


class CloseMode(str, enum.Enum):
    SELF = "SELF"
    KNN_CLOSE = "KNN_CLOSE"
    ENSEMBLE = "ENSEMBLE"


@dataclass(frozen=True)
class NeighborSets:
    background: np.ndarray
    close: np.ndarray

    def intersection(self) -> np.ndarray:
        return np.intersect1d(self.background, self.close, assume_unique=True)


# --------------------------------------------------------------------------
# exact top-k


def knn_background(i: int | None, v, bank, k: int, block: int = BLOCK_ROWS) -> np.ndarray:
    """Indices of the ``k`` rows with the largest dot product to ``v``.

    Ties go to the smaller index. A bounded min-heap of size ``k`` keyed by
    ``(similarity, -index)`` is fed block by block; only entries that beat
    the current heap minimum are pushed. ``i`` is accepted for symmetry with
    the other neighbor procedures and is not used.
    """
    rows = as_rows(bank)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (rows.shape[1],):
        raise DimensionMismatchError(f"query has shape {v.shape}, bank rows have D={rows.shape[1]}")

    heap: list[tuple[float, int]] = []
    for start in range(0, n, block):
        sims = rows[start:start + block] @ v
        if len(heap) == k:
            floor_sim = heap[0][0]
            cand = np.flatnonzero(sims >= floor_sim)
        else:
            cand = np.arange(sims.shape[0])
        for off in cand:
            item = (float(sims[off]), -(start + int(off)))
            if len(heap) < k:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    return np.sort(np.fromiter((-j for _, j in heap), dtype=np.int64, count=len(heap)))


def knn_oracle(v, bank, k: int) -> np.ndarray:
    """Full-sort reference: stable sort on descending similarity."""
    sims = similarity_row(v, bank)
    order = np.lexsort((np.arange(sims.shape[0]), -sims))
    return np.sort(order[:k])


def topk_mask(sims: np.ndarray, k: int) -> np.ndarray:
    """Boolean (B, N) mask selecting each row's top-``k`` entries, ties to smaller index.

    Same selection rule as :func:`knn_background`, vectorized for batches.
    """
    sims = np.atleast_2d(sims)
    b, n = sims.shape
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == n:
        return np.ones_like(sims, dtype=bool)
    kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1:k]
    above = sims > kth
    need = k - above.sum(axis=1, keepdims=True)
    tied = sims == kth
    tied &= np.cumsum(tied, axis=1) <= need
    return above | tied


# --------------------------------------------------------------------------
# k-means


@dataclass
class Clustering:
    assignment: np.ndarray
    m: int
    centroids: np.ndarray | None = None
    inertia: float = float("nan")
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == label)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, m):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen center
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[nxt:nxt + 1]).ravel())
    return points[chosen].copy()


def kmeans_fit(points, m: int, seed: int, max_iters: int = 100) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by moving their centroid onto the point
    farthest from its own centroid. Inertia is recorded after every
    assignment step and never increases.
    """
    points = as_rows(points)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"number of clusters must lie in [1, {n}], got {m}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, m, rng)

    history: list[float] = []
    assignment = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        new_assignment = np.argmin(d, axis=1)
        point_cost = d[np.arange(n), new_assignment]
        history.append(float(point_cost.sum()))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        centroids = _update_centroids(points, assignment, centroids, point_cost)
    assignment = new_assignment

    counts, sums = _cluster_sums(points, assignment, m)
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    inertia = float(((points - centroids[assignment]) ** 2).sum())
    for a, b in zip(history, history[1:]):
        assert b <= a * (1 + 1e-12) + 1e-12, "k-means inertia increased"
    return Clustering(assignment.astype(np.int64), m, centroids, inertia, history, n_iter)


def _cluster_sums(points, assignment, m):
    counts = np.bincount(assignment, minlength=m)
    sums = np.stack([np.bincount(assignment, weights=col, minlength=m) for col in points.T], axis=1)
    return counts, sums


def _update_centroids(points, assignment, old_centroids, point_cost) -> np.ndarray:
    counts, sums = _cluster_sums(points, assignment, old_centroids.shape[0])
    centroids = old_centroids.copy()
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    empty = np.flatnonzero(~nonempty)
    if empty.size:
        far = np.argsort(-point_cost, kind="stable")[: empty.size]
        centroids[empty] = points[far]
    return centroids


# --------------------------------------------------------------------------
# ensembles and close neighbors


@dataclass
class ClusteringEnsemble:
    clusterings: list[Clustering]
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.clusterings:
            raise ValueError("ensemble needs at least one clustering")
        n = self.clusterings[0].assignment.shape[0]
        if any(c.assignment.shape != (n,) for c in self.clusterings):
            raise ValueError("all clusterings must cover the same points")

    @property
    def n(self) -> int:
        return self.clusterings[0].assignment.shape[0]

    @property
    def h(self) -> int:
        return len(self.clusterings)

    def labels(self) -> np.ndarray:
        """(H, N) label matrix."""
        return np.stack([c.assignment for c in self.clusterings])

    def save(self, path: str | os.PathLike) -> None:
        save_ensemble(self, path)


def fit_ensemble(points, h: int, m: int, seeds, max_iters: int = 100, workers: int = 1) -> ClusteringEnsemble:
    """Fit ``h`` independent k-means runs on the same read-only snapshot."""
    seeds = [int(s) for s in seeds]
    if len(seeds) != h:
        raise ValueError("need one seed per ensemble member")
    points = np.asarray(points, dtype=np.float64)
    if workers > 1 and h > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(lambda s: kmeans_fit(points, m, s, max_iters), seeds))
    else:
        fits = [kmeans_fit(points, m, s, max_iters) for s in seeds]
    return ClusteringEnsemble(fits, seeds)


def close_neighbors(i: int, ensemble: ClusteringEnsemble) -> np.ndarray:
    """Union over the ensemble of the cluster that contains index ``i``."""
    if not 0 <= i < ensemble.n:
        raise IndexOutOfRangeError(f"index {i} outside [0, {ensemble.n})")
    labels = ensemble.labels()
    return np.flatnonzero((labels == labels[:, i:i + 1]).any(axis=0))


def close_mask(indices: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(B, N) membership mask of the close sets for a batch of indices."""
    mask = np.zeros((len(indices), labels.shape[1]), dtype=bool)
    for row in labels:
        mask |= row[None, :] == row[indices][:, None]
    return mask


def cluster_background_params(n: int, k: int) -> tuple[int, int]:
    """(H, m) for cluster-based background sets of expected size close to ``k``.

    Three clusterings whose union is about ``k`` rows need clusters of
    roughly ``k / 3`` members.
    """
    h = 3
    m = max(1, min(n, int(round(h * n / k))))
    return h, m


def background_variant(mode, i: int, v, bank, k: int | None = None,
                       ensemble: ClusteringEnsemble | None = None) -> np.ndarray:
    """Background set under one of the ablation modes.

    ``CLUSTER`` needs its own ``ensemble`` (fit with cluster_background_params).
    """
    mode = BackgroundMode(mode)
    n = as_rows(bank).shape[0]
    if mode is BackgroundMode.ALL:
        return np.arange(n)
    if mode is BackgroundMode.CLUSTER:
        if ensemble is None:
            raise ValueError("CLUSTER background needs a clustering ensemble")
        return close_neighbors(i, ensemble)
    if k is None:
        raise ValueError("KNN background needs k")
    return knn_background(i, v, bank, k)


def close_variant(mode, i: int, v, bank, ensemble: ClusteringEnsemble | None = None,
                  k_prime: int | None = None) -> np.ndarray:
    mode = CloseMode(mode)
    n = as_rows(bank).shape[0]
    if not 0 <= i < n:
        raise IndexOutOfRangeError(f"index {i} outside [0, {n})")
    if mode is CloseMode.SELF:
        return np.array([i], dtype=np.int64)
    if mode is CloseMode.KNN_CLOSE:
        if k_prime is None or k_prime < 1:
            raise ValueError("KNN_CLOSE needs k_prime >= 1")
        return index_set(np.append(knn_background(i, v, bank, k_prime), i))
    if ensemble is None:
        raise ValueError("ENSEMBLE close neighbors need a clustering ensemble")
    return close_neighbors(i, ensemble)


# --------------------------------------------------------------------------
# persistence


def save_ensemble(ensemble: ClusteringEnsemble, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, CLUSTER_MAGIC, CLUSTER_VERSION)
        binio.write_u32(fh, ensemble.n, ensemble.h)
        for c in ensemble.clusterings:
            binio.write_u32(fh, c.m)
            binio.write_array(fh, c.assignment, "<u4")


def load_ensemble(path: str | os.PathLike) -> ClusteringEnsemble:
    """Read an ``LACL`` file. Centroids are not stored and come back as None."""
    with open(path, "rb") as fh:
        binio.read_header(fh, CLUSTER_MAGIC, CLUSTER_VERSION)
        n = binio.read_u32(fh)
        h = binio.read_u32(fh)
        fits = []
        for _ in range(h):
            m = binio.read_u32(fh)
            labels = binio.read_array(fh, n, "<u4").astype(np.int64)
            if labels.size and labels.max() >= m:
                raise FormatError("cluster label exceeds cluster count")
            fits.append(Clustering(labels, m))
        binio.expect_eof(fh)
    return ClusteringEnsemble(fits)
