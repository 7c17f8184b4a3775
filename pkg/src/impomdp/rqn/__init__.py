"""Recurrent dueling Q-network trained on raw observation-action histories."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .network import NetworkShape, RecurrentState, RQNetwork, dueling_combine, one_hot, param_count_formula
from .optim import Adam
from .policy import RQNPolicy
from .training import (
    GridSearchResult,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    collect_batch,
    epsilon_at,
    grid_search,
    lcc_mse,
    lr_at,
    train,
    train_epoch,
)

__all__ = [
    "Adam", "CheckpointError", "GridSearchResult", "NetworkShape", "RQNPolicy", "RQNetwork", "RecurrentState",
    "TrainConfig", "TrainResult", "TrainingDiverged", "collect_batch", "dueling_combine", "epsilon_at",
    "grid_search", "lcc_mse", "load_checkpoint", "lr_at", "one_hot", "param_count_formula", "save_checkpoint",
    "train", "train_epoch",
]
