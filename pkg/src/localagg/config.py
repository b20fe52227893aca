"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .neighbors import BackgroundMode, CloseMode

ALIASES = {
    "lambda": "weight_decay",
    "t": "mix",
    "H": "n_clusterings",
    "m": "n_clusters",
    "D": "dim",
    "K": "knn_k",
}


@dataclass
class TrainConfig:
    tau: float = 0.07
    dim: int = 128
    weight_decay: float = 1e-4
    mix: float = 0.5
    k: int | None = None
    n_clusterings: int = 3
    n_clusters: int | None = None
    batch_size: int = 128
    epochs: int = 50
    warm_start_epochs: int = 5
    lr: float = 0.03
    lr_milestones: tuple[int, ...] = ()
    lr_drop: float = 0.1
    momentum: float = 0.9
    recluster_every: int = 1
    recluster_unit: str = "epoch"
    background_mode: BackgroundMode = BackgroundMode.KNN
    close_mode: CloseMode = CloseMode.ENSEMBLE
    k_prime: int = 4
    seed: int = 0
    cluster_source: str = "bank"
    hidden_dims: tuple[int, ...] = (128, 64)
    knn_k: int | None = None
    kmeans_iters: int = 100
    val_fraction: float = 0.1

    def __post_init__(self):
        self.background_mode = BackgroundMode(self.background_mode)
        self.close_mode = CloseMode(self.close_mode)
        self.lr_milestones = tuple(int(x) for x in self.lr_milestones)
        self.hidden_dims = tuple(int(x) for x in self.hidden_dims)

    def resolved_k(self, n: int) -> int:
        """Background size; defaults to max(32, N/300), the 4096-of-1.28M ratio."""
        k = self.k if self.k is not None else max(32, n // 300)
        return min(k, n)

    def resolved_m(self, n: int) -> int:
        """Clusters per clustering; defaults to max(4, N/128), the 10000-of-1.28M ratio."""
        m = self.n_clusters if self.n_clusters is not None else max(4, n // 128)
        return min(m, n)

    def resolved_knn_k(self, n: int) -> int:
        k = self.knn_k if self.knn_k is not None else max(1, min(200, n // 10))
        return min(k, n)

    def validate(self, n: int | None = None) -> "TrainConfig":
        problems = []
        if not 0.0 < self.tau <= 1.0:
            problems.append("tau must lie in (0, 1]")
        if not 0.0 <= self.mix <= 1.0:
            problems.append("mix (t) must lie in [0, 1]")
        if self.dim < 2:
            problems.append("dim must be >= 2")
        if self.epochs < 0 or self.warm_start_epochs < 0:
            problems.append("epoch counts must be non-negative")
        if self.epochs > 0 and self.warm_start_epochs >= self.epochs:
            problems.append("warm_start_epochs must be smaller than epochs")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not 0.0 <= self.momentum < 1.0:
            problems.append("need lr >= 0, weight_decay >= 0, momentum in [0, 1)")
        if self.n_clusterings < 1:
            problems.append("H must be >= 1")
        if self.recluster_every < 1 or self.recluster_unit not in ("epoch", "step"):
            problems.append("recluster_every must be >= 1 and recluster_unit 'epoch' or 'step'")
        if self.cluster_source not in ("bank", "fresh-forward"):
            problems.append("cluster_source must be 'bank' or 'fresh-forward'")
        if self.k_prime < 1:
            problems.append("k_prime must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            problems.append("val_fraction must lie in (0, 1)")
        if n is not None:
            if self.k is not None and not 1 <= self.k <= n:
                problems.append(f"k must lie in [1, N={n}]")
            if self.n_clusters is not None and not 1 <= self.n_clusters <= n:
                problems.append(f"m must lie in [1, N={n}]")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str):
    fld = {f.name: f for f in dataclasses.fields(TrainConfig)}[name]
    kind = str(fld.type)
    raw = raw.strip()
    try:
        if name in ("lr_milestones", "hidden_dims"):
            return tuple(int(x) for x in raw.replace(",", " ").split()) if raw else ()
        if raw.lower() in ("none", "auto", "") and "None" in kind:
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if name == "background_mode":
            return BackgroundMode(raw.upper())
        if name == "close_mode":
            return CloseMode(raw.upper())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, value)
    return dataclasses.replace(base or TrainConfig(), **changes)


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(x) for x in value)
        elif hasattr(value, "value"):
            value = value.value
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
