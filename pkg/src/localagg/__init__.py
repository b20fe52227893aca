"""Local aggregation embedding learning on a unit-sphere memory bank."""

from .bank import MemoryBank, init_random, load_bank, save_bank
from .config import TrainConfig, load_config, parse_config
from .data import Dataset, generate, load_dataset, save_dataset
from .neighbors import BackgroundMode, CloseMode, NeighborSets
from .objective import ir_loss, la_loss
from .trainer import TrainResult, train

__all__ = [
    "BackgroundMode", "CloseMode", "Dataset", "MemoryBank", "NeighborSets", "TrainConfig", "TrainResult",
    "generate", "init_random", "ir_loss", "la_loss", "load_bank", "load_config", "load_dataset",
    "parse_config", "save_bank", "save_dataset", "train",
]
