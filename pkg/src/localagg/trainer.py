"""The training loop: instance-recognition warm start, then local aggregation.

Per batch the order is fixed: forward, neighbor identification against
the pre-update bank, loss and gradient, optimizer step, and only then the
bank update with the batch's fresh features.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .bank import MemoryBank, init_random
from .config import TrainConfig
from .data import Dataset, train_val_split
from .embedding import normalize_rows
from .encoder import EncoderParams, OptimizerState, backward, forward, init_params, round_to_f32, sgd_step
from .errors import ConfigError
from .evaluation import default_density_ranks, embed, knn_accuracy
from .neighbors import (
    BackgroundMode,
    ClusteringEnsemble,
    CloseMode,
    close_mask,
    cluster_background_params,
    fit_ensemble,
    topk_mask,
)
from .objective import chain_through_normalize, ir_loss_grad_batch, la_loss_grad_batch

log = logging.getLogger(__name__)

TELEMETRY_HEADER = ["epoch", "phase", "mean_loss", "skipped", "knn_acc", "local_density",
                    "background_density", "seconds"]


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    mean_loss: float
    skipped: int
    knn_acc: float
    local_density: float
    background_density: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), self.phase, repr(self.mean_loss), str(self.skipped), repr(self.knn_acc),
                repr(self.local_density), repr(self.background_density), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    params: EncoderParams
    bank: MemoryBank
    telemetry: list[EpochRecord]
    initial: EpochRecord
    ensemble: ClusteringEnsemble | None
    train_idx: np.ndarray
    val_idx: np.ndarray
    config: TrainConfig
    skipped_bank_updates: int = 0
    lr_trace: list[float] = field(default_factory=list)

    @property
    def final_knn(self) -> float:
        return self.telemetry[-1].knn_acc if self.telemetry else self.initial.knn_acc


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _band_means(rows: np.ndarray, local_rank: int, band: tuple[int, int], block: int = 512):
    """Mean local and band densities over all rows via partial sorts."""
    n = rows.shape[0]
    low, high = band
    kth = sorted({local_rank - 1, low - 2, high - 1} - {-1})
    local_sum = back_sum = 0.0
    for start in range(0, n, block):
        stop = min(n, start + block)
        neg = -(rows[start:stop] @ rows.T)
        neg[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.partition(neg, kth, axis=1)
        local_sum -= part[:, :local_rank].sum()
        back_sum -= part[:, low - 1:high].sum()
    return local_sum / n / local_rank, back_sum / n / (high - low + 1)


class _Run:
    def __init__(self, dataset: Dataset, cfg: TrainConfig, workers: int):
        self.cfg = cfg
        self.workers = workers
        self.train_idx, self.val_idx = train_val_split(dataset.n, cfg.seed, cfg.val_fraction)
        self.x = dataset.inputs[self.train_idx]
        self.n = self.x.shape[0]
        cfg.validate(self.n)
        self.x_val = dataset.inputs[self.val_idx]
        self.y_val = None if dataset.labels is None else dataset.labels[self.val_idx]
        self.k = cfg.resolved_k(self.n)
        self.m = cfg.resolved_m(self.n)
        self.knn_k = cfg.resolved_knn_k(self.n)
        self.params = init_params([dataset.input_dim, *cfg.hidden_dims, cfg.dim], derive_seed(cfg.seed, 1))
        self.bank = init_random(self.n, cfg.dim, derive_seed(cfg.seed, 2), cfg.mix)
        if dataset.labels is not None:
            self.bank.set_eval_labels(dataset.labels[self.train_idx])
        self.opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.order_rng = np.random.default_rng(derive_seed(cfg.seed, 3))
        self.ensemble: ClusteringEnsemble | None = None
        self.bg_ensemble: ClusteringEnsemble | None = None
        self.local_rank, self.band = default_density_ranks(self.n) if self.n >= 4 else (1, (1, 2))

    # -- clustering --------------------------------------------------------
    def recluster(self, tag: int) -> None:
        cfg = self.cfg
        if cfg.close_mode is CloseMode.ENSEMBLE:
            self.ensemble = recluster(self.bank, cfg, tag, self.workers, self.params, self.x)
        if cfg.background_mode is BackgroundMode.CLUSTER:
            points = embed(self.params, self.x) if cfg.cluster_source == "fresh-forward" else self.bank.snapshot()
            h, m = cluster_background_params(self.n, self.k)
            seeds = [derive_seed(cfg.seed, 5, tag, j) for j in range(h)]
            self.bg_ensemble = fit_ensemble(points, h, m, seeds, cfg.kmeans_iters, self.workers)

    # -- one optimization step ---------------------------------------------
    def step(self, idx: np.ndarray, phase: str):
        cfg = self.cfg
        z, cache = forward(self.params, self.x[idx])
        v = normalize_rows(z)
        rows = self.bank.rows
        sims = v @ rows.T
        if phase == "IR":
            losses, g_v = ir_loss_grad_batch(idx, sims, rows, cfg.tau)
            valid = np.ones(idx.size, dtype=bool)
        else:
            own = np.zeros_like(sims, dtype=bool)
            own[np.arange(idx.size), idx] = True
            if cfg.background_mode is BackgroundMode.KNN:
                background = topk_mask(sims, self.k) | own
            elif cfg.background_mode is BackgroundMode.ALL:
                background = np.ones_like(own)
            else:
                background = close_mask(idx, self.bg_ensemble.labels())
            if cfg.close_mode is CloseMode.ENSEMBLE:
                close = close_mask(idx, self.ensemble.labels())
            elif cfg.close_mode is CloseMode.SELF:
                close = own
            else:
                close = topk_mask(sims, min(cfg.k_prime, self.n)) | own
            losses, g_v, valid = la_loss_grad_batch(v, sims, background, close, rows, cfg.tau)
        g_z = chain_through_normalize(g_v, z) / idx.size
        grads = backward(self.params, cache, g_z)
        sgd_step(self.params, grads, self.opt)
        self.bank.update_rows(idx, v)
        return losses[valid], int(np.count_nonzero(~valid))

    # -- evaluation ----------------------------------------------------------
    def evaluate(self) -> tuple[float, float, float]:
        """kNN accuracy and densities on float32-rounded state, as a saved run would see it."""
        bank32 = self.bank.copy()
        bank32.rows = self.bank.rows.astype(np.float32).astype(np.float64)
        acc = float("nan")
        if self.y_val is not None and self.x_val.shape[0] and self.bank.has_labels:
            feats = embed(round_to_f32(self.params), self.x_val)
            acc = knn_accuracy(feats, self.y_val, bank32, self.knn_k, self.cfg.tau)
        if self.n >= 4:
            local, back = _band_means(bank32.rows, self.local_rank, self.band)
        else:
            local = back = float("nan")
        return acc, float(local), float(back)


def train(dataset: Dataset, config: TrainConfig, workers: int = 1) -> TrainResult:
    """Train an encoder and memory bank; fully deterministic given ``config.seed``."""
    if dataset.n < 2:
        raise ConfigError("dataset needs at least two rows")
    cfg = config.replace().validate()
    run = _Run(dataset, cfg, workers)
    t0 = time.perf_counter()
    acc, local, back = run.evaluate()
    initial = EpochRecord(0, "init", float("nan"), 0, acc, local, back, time.perf_counter() - t0)
    telemetry: list[EpochRecord] = []
    lr_trace = []
    la_steps = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        phase = "IR" if epoch < cfg.warm_start_epochs else "LA"
        run.opt.lr = cfg.lr * cfg.lr_drop ** sum(1 for ms in cfg.lr_milestones if epoch >= ms)
        lr_trace.append(run.opt.lr)
        if phase == "LA" and cfg.recluster_unit == "epoch":
            la_epoch = epoch - cfg.warm_start_epochs
            if la_epoch % cfg.recluster_every == 0:
                run.recluster(epoch)
        order = run.order_rng.permutation(run.n)
        losses, skipped = [], 0
        for start in range(0, run.n, cfg.batch_size):
            if phase == "LA" and cfg.recluster_unit == "step" and la_steps % cfg.recluster_every == 0:
                run.recluster(la_steps)
            batch_losses, batch_skipped = run.step(order[start:start + cfg.batch_size], phase)
            losses.append(batch_losses)
            skipped += batch_skipped
            if phase == "LA":
                la_steps += 1
        all_losses = np.concatenate(losses)
        mean_loss = float(all_losses.mean()) if all_losses.size else float("nan")
        acc, local, back = run.evaluate()
        rec = EpochRecord(epoch, phase, mean_loss, skipped, acc, local, back, time.perf_counter() - t0)
        telemetry.append(rec)
        log.info("epoch %d %s loss=%.4f knn=%.4f local=%.3f back=%.3f skipped=%d",
                 epoch, phase, mean_loss, acc, local, back, skipped)
    return TrainResult(run.params, run.bank, telemetry, initial, run.ensemble, run.train_idx, run.val_idx,
                       cfg, run.bank.skipped_updates, lr_trace)


def recluster(bank, config: TrainConfig, tag: int = 0, workers: int = 1, params=None, inputs=None) -> ClusteringEnsemble:
    """Fit the close-neighbor ensemble for one cluster boundary.

    With ``cluster_source = fresh-forward`` the encoder ``params`` are run
    on ``inputs`` and those outputs are clustered instead of the bank.
    """
    if config.cluster_source == "fresh-forward":
        if params is None or inputs is None:
            raise ConfigError("fresh-forward clustering needs encoder params and inputs")
        points = embed(params, inputs)
    else:
        points = bank.snapshot() if isinstance(bank, MemoryBank) else np.asarray(bank)
    n = points.shape[0]
    seeds = [derive_seed(config.seed, 4, tag, j) for j in range(config.n_clusterings)]
    return fit_ensemble(points, config.n_clusterings, config.resolved_m(n), seeds, config.kmeans_iters, workers)


def write_telemetry(records: list[EpochRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TELEMETRY_HEADER)
        for rec in records:
            writer.writerow(rec.row())


def read_telemetry(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# ablations

ABLATION_HEADER = ["variant", "background_mode", "close_mode", "H", "m", "k_prime", "seed", "knn_acc", "status"]


@dataclass
class AblationRow:
    variant: str
    config: TrainConfig
    knn_acc: float
    status: str = "ok"

    def row(self) -> list[str]:
        c = self.config
        return [self.variant, c.background_mode.value, c.close_mode.value, str(c.n_clusterings),
                "auto" if c.n_clusters is None else str(c.n_clusters), str(c.k_prime), str(c.seed),
                repr(self.knn_acc), self.status]


def expand_grid(background_modes=None, close_modes=None, hm_pairs=None) -> list[dict]:
    """Cartesian product of ablation axes as a list of config overrides."""
    cells = [{}]
    for key, values in (("background_mode", background_modes), ("close_mode", close_modes)):
        if values:
            cells = [dict(c, **{key: v}) for c in cells for v in values]
    if hm_pairs:
        cells = [dict(c, n_clusterings=h, n_clusters=m) for c in cells for h, m in hm_pairs]
    return cells


def _variant_name(overrides: dict) -> str:
    if not overrides:
        return "base"
    parts = []
    for key, value in overrides.items():
        parts.append(f"{key}={getattr(value, 'value', value)}")
    return ";".join(parts)


def run_ablation_grid(dataset: Dataset, base_config: TrainConfig, grid: list[dict],
                      workers: int = 1) -> list[AblationRow]:
    """Train one model per grid cell with the base seed and data order."""
    rows = []
    for overrides in grid:
        name = _variant_name(overrides)
        cfg = base_config
        try:
            cfg = base_config.replace(**overrides)
            result = train(dataset, cfg, workers)
            rows.append(AblationRow(name, cfg, result.final_knn))
        except Exception as exc:  # a failed cell must not stop the grid
            log.warning("ablation cell %s failed: %s", name, exc)
            rows.append(AblationRow(name, cfg, float("nan"), f"error: {exc}"))
    return rows


def write_ablation_table(rows: list[AblationRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow(r.row())
