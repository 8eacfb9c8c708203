from .adam import AdamHyperparams, AdamState, adam_step, adam_update
from .checkpoint import load_model, save_model
from .model import (
    MPDL_FILTERS,
    ArchitectureDescriptor,
    ArchitectureMismatch,
    CnnModel,
    backward,
    cross_entropy,
    forward,
    init_model,
    softmax,
    zero_model,
)
from .training import TrainConfig, TrainHistory, evaluate_loss, predict_batch, predict_volume, train

__all__ = [
    "MPDL_FILTERS",
    "AdamHyperparams",
    "AdamState",
    "ArchitectureDescriptor",
    "ArchitectureMismatch",
    "CnnModel",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "adam_update",
    "backward",
    "cross_entropy",
    "evaluate_loss",
    "forward",
    "init_model",
    "load_model",
    "predict_batch",
    "predict_volume",
    "save_model",
    "softmax",
    "train",
    "zero_model",
]
