"""Minibatch training with early stopping, and whole-volume inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..signatures import CLASS_NAMES, PatchDataset, slice_patches
from ..volume import LabelMap, MultiparametricVolume
from .adam import AdamHyperparams, AdamState, adam_step
from .model import ArchitectureMismatch, CnnModel, backward, cross_entropy, forward

__all__ = ["TrainConfig", "TrainHistory", "train", "evaluate_loss", "predict_batch", "predict_volume"]

log = logging.getLogger(__name__)

INFERENCE_CHUNK = 4096


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    hyper: AdamHyperparams = field(default_factory=AdamHyperparams)

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_json(self) -> dict:
        return {
            "epochs": [
                {"epoch": i + 1, "train_loss": t, "val_loss": v}
                for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))
            ],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.val_loss[self.best_epoch - 1] if self.best_epoch else None,
            "stopped_early": self.stopped_early,
        }


def evaluate_loss(model: CnnModel, values: np.ndarray, labels: np.ndarray, chunk: int = INFERENCE_CHUNK) -> float:
    total = 0.0
    for start in range(0, len(labels), chunk):
        probs, _ = forward(model, values[start : start + chunk], keep_cache=False)
        total += cross_entropy(probs, labels[start : start + chunk]) * len(probs)
    return total / len(labels)


def train(model: CnnModel, dataset: PatchDataset, config: TrainConfig = TrainConfig()):
    """Train with Adam and return ``(best_model, history)``.

    Each epoch reshuffles the training split from one seeded stream and walks
    it in minibatches, keeping the final short batch. Training stops after
    ``max_epochs`` or once validation loss has gone ``patience`` epochs
    without improving; the parameters of the best validation epoch are
    returned.
    """
    if len(dataset.train_idx) == 0 or len(dataset.val_idx) == 0:
        raise ValueError("training needs nonempty train and validation splits")
    if dataset.n_channels != model.arch.in_channels:
        raise ArchitectureMismatch(
            f"dataset has {dataset.n_channels} channels, model expects {model.arch.in_channels}"
        )
    rng = np.random.default_rng(config.seed)
    hyper = config.hyper
    state = AdamState.zeros_like(model.params)
    val_x, val_y = dataset.values[dataset.val_idx], dataset.labels[dataset.val_idx]
    history = TrainHistory()
    best_model, best_loss, stale = model, np.inf, 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(dataset.train_idx)
        running = 0.0
        for start in range(0, len(order), hyper.minibatch):
            idx = order[start : start + hyper.minibatch]
            labels = dataset.labels[idx]
            probs, cache = forward(model, dataset.values[idx])
            running += cross_entropy(probs, labels) * len(idx)
            grads = backward(model, cache, labels)
            model, state = adam_step(model, state, grads, hyper)
        train_loss = running / len(order)
        val_loss = evaluate_loss(model, val_x, val_y)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        log.info("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_model, best_loss, stale = model, val_loss, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
    return best_model, history


def predict_batch(model: CnnModel, patches: np.ndarray, chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Argmax class per patch; ties go to the lowest class index."""
    out = np.empty(len(patches), dtype=np.int64)
    for start in range(0, len(patches), chunk):
        probs, _ = forward(model, patches[start : start + chunk], keep_cache=False)
        out[start : start + chunk] = np.argmax(probs, axis=1)
    return out


def predict_volume(model: CnnModel, volume: MultiparametricVolume) -> LabelMap:
    if volume.n_channels != model.arch.in_channels:
        raise ArchitectureMismatch(
            f"volume has {volume.n_channels} channels, model expects {model.arch.in_channels}"
        )
    nx, ny, nz = volume.dims
    labels = np.empty((nz, ny * nx), dtype=np.uint8)
    for z in range(nz):
        labels[z] = predict_batch(model, slice_patches(volume, z))
    legend = CLASS_NAMES if model.arch.n_classes == len(CLASS_NAMES) else tuple(
        f"class{i}" for i in range(model.arch.n_classes)
    )
    return LabelMap(volume.dims, labels, legend)
