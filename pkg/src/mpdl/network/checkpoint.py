"""Checkpoint bundles: ``model.json`` plus float64 ``params.raw``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..volume import BundleError, _json_bytes, _write_bundle
from .model import ArchitectureDescriptor, ArchitectureMismatch, CnnModel

__all__ = ["save_model", "load_model"]

MODEL_JSON = "model.json"
PARAMS_RAW = "params.raw"


def save_model(
    model: CnnModel,
    path,
    train_seed: int | None = None,
    epoch: int | None = None,
    val_loss: float | None = None,
    extra: dict[str, bytes] | None = None,
) -> None:
    header = {
        "arch": model.arch.to_json(),
        "n_channels": model.arch.in_channels,
        "param_names": model.arch.param_names(),
        "param_shapes": [list(s) for s in model.arch.param_shapes()],
        "init_seed": model.init_seed,
        "train_seed": train_seed,
        "epoch": epoch,
        "val_loss": val_loss,
        "dtype": "float64-le",
    }
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    files = {MODEL_JSON: _json_bytes(header), PARAMS_RAW: payload}
    files.update(extra or {})
    _write_bundle(Path(path), files)


def load_model(path, n_channels: int | None = None) -> tuple[CnnModel, dict]:
    """Load a checkpoint; returns ``(model, header)``.

    Pass ``n_channels`` to demand a specific input width; a different one
    raises :class:`ArchitectureMismatch`.
    """
    path = Path(path)
    header_path, raw_path = path / MODEL_JSON, path / PARAMS_RAW
    if not header_path.is_file() or not raw_path.is_file():
        raise BundleError(f"{path} is not a checkpoint bundle")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        arch = ArchitectureDescriptor(
            in_channels=int(header["n_channels"]),
            conv_filters=tuple(header["arch"]["conv_filters"]),
            n_classes=int(header["arch"]["n_classes"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise BundleError(f"{header_path}: bad header ({exc})") from None
    if n_channels is not None and n_channels != arch.in_channels:
        raise ArchitectureMismatch(
            f"checkpoint expects {arch.in_channels} channels, data has {n_channels}"
        )
    shapes = arch.param_shapes()
    sizes = [int(np.prod(s)) for s in shapes]
    raw = raw_path.read_bytes()
    if len(raw) != 8 * sum(sizes):
        raise BundleError(f"{raw_path}: {len(raw)} bytes, architecture implies {8 * sum(sizes)}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    params, offset = [], 0
    for shape, size in zip(shapes, sizes):
        params.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    return CnnModel(arch, tuple(params), header.get("init_seed")), header
