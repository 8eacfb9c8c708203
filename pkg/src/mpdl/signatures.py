"""Tissue signatures and 5x5xn training patches.

A signature is the vector of channel intensities at one voxel. A patch is
the in-plane 5x5 neighbourhood of a voxel across all channels, shaped
``(n, 5, 5)``; samples falling outside the slice are mirrored about the
boundary (index -1 reads 1, index nx reads nx - 2).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .volume import LabelMap, MultiparametricVolume

__all__ = [
    "TissueClass",
    "CLASS_NAMES",
    "N_CLASSES",
    "PATCH_SIZE",
    "Patch",
    "PatchDataset",
    "extract_signature",
    "extract_patch",
    "extract_patches",
    "slice_patches",
    "build_dataset",
    "split_dataset",
]

PATCH_SIZE = 5
_HALF = PATCH_SIZE // 2


class TissueClass(enum.IntEnum):
    BACKGROUND = 0
    MUSCLE = 1
    FAT = 2
    FAT_INFILTRATED = 3
    BONE = 4
    SKIN = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "TissueClass":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown tissue class {name!r}; expected one of {CLASS_NAMES}") from None


CLASS_NAMES: tuple[str, ...] = tuple(t.label for t in TissueClass)
N_CLASSES = len(CLASS_NAMES)


@dataclass(frozen=True, eq=False)
class Patch:
    values: np.ndarray  # (n, 5, 5)
    center: tuple[int, int, int]
    label: int | None = None


def _check_voxel(volume_dims, x: int, y: int, z: int) -> None:
    nx, ny, nz = volume_dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"voxel ({x}, {y}, {z}) outside volume of dims {volume_dims}")


def _reflect(idx: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * (size - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= size, period - idx, idx)


def extract_signature(volume: MultiparametricVolume, x: int, y: int, z: int) -> np.ndarray:
    _check_voxel(volume.dims, x, y, z)
    return volume.data[:, z, y, x].copy()


def extract_patches(volume: MultiparametricVolume, centers: np.ndarray) -> np.ndarray:
    """Gather patches for an ``(N, 3)`` array of ``(x, y, z)`` centers -> ``(N, n, 5, 5)``."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    nx, ny, nz = volume.dims
    x, y, z = centers.T
    if centers.size and (
        x.min() < 0 or y.min() < 0 or z.min() < 0 or x.max() >= nx or y.max() >= ny or z.max() >= nz
    ):
        raise IndexError(f"patch center outside volume of dims {volume.dims}")
    offsets = np.arange(-_HALF, _HALF + 1)
    xs = _reflect(x[:, None] + offsets, nx)  # (N, 5)
    ys = _reflect(y[:, None] + offsets, ny)
    # data is (n, nz, ny, nx); index -> (n, N, 5, 5) then move N first
    out = volume.data[:, z[:, None, None], ys[:, :, None], xs[:, None, :]]
    return np.ascontiguousarray(np.moveaxis(out, 1, 0))


def extract_patch(volume: MultiparametricVolume, x: int, y: int, z: int) -> Patch:
    _check_voxel(volume.dims, x, y, z)
    values = extract_patches(volume, np.array([[x, y, z]]))[0]
    return Patch(values=values, center=(x, y, z))


def slice_patches(volume: MultiparametricVolume, z: int) -> np.ndarray:
    """Every patch of slice ``z`` in row-major (y, x) order -> ``(ny*nx, n, 5, 5)``."""
    nx, ny, _ = volume.dims
    img = volume.data[:, z]
    yi = _reflect(np.arange(-_HALF, ny + _HALF), ny)
    xi = _reflect(np.arange(-_HALF, nx + _HALF), nx)
    padded = img[:, yi][:, :, xi]
    win = np.lib.stride_tricks.sliding_window_view(padded, (PATCH_SIZE, PATCH_SIZE), axis=(1, 2))
    # win: (n, ny, nx, 5, 5)
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ny * nx, -1, PATCH_SIZE, PATCH_SIZE)


@dataclass(frozen=True, eq=False)
class PatchDataset:
    """Labeled patches held as arrays, plus sampling and split bookkeeping."""

    values: np.ndarray  # (N, n, 5, 5) float64
    centers: np.ndarray  # (N, 3) int64, (x, y, z)
    labels: np.ndarray  # (N,) int64
    class_counts: tuple[int, ...]
    seed: int
    empty_classes: tuple[int, ...] = ()
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def patch(self, i: int) -> Patch:
        return Patch(self.values[i], tuple(int(c) for c in self.centers[i]), int(self.labels[i]))

    def digest_bytes(self) -> bytes:
        parts = (self.values, self.centers, self.labels, self.train_idx, self.val_idx)
        return b"".join(np.ascontiguousarray(a).tobytes() for a in parts)


def build_dataset(
    volume: MultiparametricVolume, labelmap: LabelMap, per_class_cap: int, seed: int
) -> PatchDataset:
    """Sample up to ``per_class_cap`` voxels per class and gather their patches.

    Every class draws from one seeded stream in class order, uniformly without
    replacement; a class with fewer voxels than the cap is taken whole. With no
    split assigned yet, every patch is in the training partition.
    """
    if volume.dims != labelmap.dims:
        raise ValueError(f"dim mismatch: volume {volume.dims} vs labels {labelmap.dims}")
    if per_class_cap < 1:
        raise ValueError("per_class_cap must be positive")
    rng = np.random.default_rng(seed)
    flat = labelmap.labels.ravel()
    nx, ny, _ = volume.dims
    chosen, labels, counts, empty = [], [], [], []
    for c in range(labelmap.n_classes):
        where = np.flatnonzero(flat == c)
        if where.size == 0:
            empty.append(c)
        if where.size > per_class_cap:
            where = np.sort(where[rng.choice(where.size, size=per_class_cap, replace=False)])
        chosen.append(where)
        labels.append(np.full(where.size, c, dtype=np.int64))
        counts.append(int(where.size))
    flat_idx = np.concatenate(chosen)
    z, rem = np.divmod(flat_idx, ny * nx)
    y, x = np.divmod(rem, nx)
    centers = np.stack([x, y, z], axis=1).astype(np.int64)
    return PatchDataset(
        values=extract_patches(volume, centers),
        centers=centers,
        labels=np.concatenate(labels),
        class_counts=tuple(counts),
        seed=seed,
        empty_classes=tuple(empty),
        train_idx=np.arange(flat_idx.size, dtype=np.int64),
    )


def split_dataset(dataset: PatchDataset, validation_fraction: float, seed: int) -> PatchDataset:
    """Stratified train/validation split.

    Each class sends ``floor(fraction * count)`` patches to validation, at
    least one whenever the class has two or more.
    """
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    val = []
    for c in range(len(dataset.class_counts)):
        members = np.flatnonzero(dataset.labels == c)
        k = math.floor(validation_fraction * members.size)
        if members.size >= 2:
            k = max(k, 1)
        if k:
            val.append(members[rng.permutation(members.size)[:k]])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[val_idx] = False
    return replace(dataset, train_idx=np.flatnonzero(train_mask), val_idx=val_idx.astype(np.int64))
