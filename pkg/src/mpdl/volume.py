"""Multiparametric volumes, label maps and their on-disk bundles.

A volume is ``n`` co-registered scalar channels sampled on the same
``(nx, ny, nz)`` grid. Data is held in memory as float64 with shape
``(n, nz, ny, nx)``; bundles store it as little-endian float32, so a
save/load round trip is exact for float32-representable data (which is
everything that was itself loaded from disk).
"""
from __future__ import annotations

import enum
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BundleError",
    "ChannelKind",
    "ChannelMeta",
    "MultiparametricVolume",
    "LabelMap",
    "PALETTE",
    "load_volume",
    "save_volume",
    "load_labels",
    "save_labels",
    "normalize_channels",
    "nearest_rank_percentile",
    "export_slice",
    "export_labels_slice",
    "write_pgm",
    "write_ppm",
]

HEADER_NAME = "header.json"
DATA_NAME = "data.raw"
LABELS_HEADER_NAME = "labels.json"
LABELS_DATA_NAME = "labels.raw"

PALETTE: dict[str, tuple[int, int, int]] = {
    "background": (0, 0, 0),
    "muscle": (200, 60, 60),
    "fat": (240, 220, 120),
    "fat_infiltrated": (240, 140, 40),
    "bone": (230, 230, 230),
    "skin": (120, 60, 160),
}
_FALLBACK_COLOR = (128, 128, 128)


class BundleError(ValueError):
    """Malformed, missing or inconsistent on-disk bundle."""


class ChannelKind(str, enum.Enum):
    T1 = "T1"
    T2 = "T2"
    DIXON = "DIXON"
    DWI = "DWI"
    OTHER = "OTHER"


@dataclass(frozen=True)
class ChannelMeta:
    name: str
    kind: ChannelKind
    b_value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        if not self.name:
            raise ValueError("channel name must be nonempty")
        if self.kind is ChannelKind.DWI:
            if self.b_value is None:
                raise ValueError(f"DWI channel {self.name!r} has no b-value")
            if not math.isfinite(self.b_value) or self.b_value < 0:
                raise ValueError(f"invalid b-value {self.b_value} on {self.name!r}")
        elif self.b_value is not None:
            raise ValueError(f"non-DWI channel {self.name!r} carries a b-value")

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind.value}
        if self.b_value is not None:
            out["b_value"] = self.b_value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelMeta":
        return cls(name=obj["name"], kind=obj["kind"], b_value=obj.get("b_value"))


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive counts, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class MultiparametricVolume:
    """``n`` channels on an ``(nx, ny, nz)`` grid, data shaped ``(n, nz, ny, nx)``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    channels: tuple[ChannelMeta, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive lengths, got {spacing}")
        channels = tuple(self.channels)
        if not channels:
            raise ValueError("a volume needs at least one channel")
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names in {names}")
        nx, ny, nz = dims
        data = np.asarray(self.data, dtype=np.float64)
        expected = (len(channels), nz, ny, nx)
        if data.size != math.prod(expected):
            raise ValueError(f"data has {data.size} values, expected {math.prod(expected)}")
        data = data.reshape(expected)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def channel_index(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(name)

    def dwi_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.channels) if c.kind is ChannelKind.DWI]

    def with_data(self, data: np.ndarray) -> "MultiparametricVolume":
        return MultiparametricVolume(self.dims, self.spacing, self.channels, data)

    def equals(self, other: "MultiparametricVolume") -> bool:
        """Exact equality of geometry, metadata and every data bit."""
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.channels == other.channels
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Class index per voxel, shaped ``(nz, ny, nx)``, with a class legend."""

    dims: tuple[int, int, int]
    labels: np.ndarray = field(repr=False)
    legend: tuple[str, ...]

    def __post_init__(self):
        dims = _check_dims(self.dims)
        legend = tuple(self.legend)
        if not legend or len(legend) > 256:
            raise ValueError("legend must have between 1 and 256 classes")
        nx, ny, nz = dims
        labels = np.asarray(self.labels)
        if labels.size != nx * ny * nz:
            raise ValueError(f"labels have {labels.size} entries, expected {nx * ny * nz}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(legend)):
            raise ValueError(f"labels must lie in [0, {len(legend)})")
        labels = labels.astype(np.uint8).reshape(nz, ny, nx)
        labels.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "legend", legend)

    @property
    def n_classes(self) -> int:
        return len(self.legend)

    def mask(self, class_index: int) -> np.ndarray:
        return self.labels == class_index

    def equals(self, other: "LabelMap") -> bool:
        return (
            self.dims == other.dims
            and self.legend == other.legend
            and self.labels.tobytes() == other.labels.tobytes()
        )


# -- bundle I/O ---------------------------------------------------------------


def _write_bundle(path: Path, files: dict[str, bytes]) -> None:
    # Files land in a sibling temp dir first so a failure never leaves a partial bundle.
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise OSError(f"parent directory {parent} does not exist")
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=parent))
    try:
        for name, payload in files.items():
            (tmp / name).write_bytes(payload)
        if path.is_dir():
            old = path.with_name(f".{path.name}.old-{os.getpid()}")
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            if path.exists():
                raise OSError(f"{path} exists and is not a directory")
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode("utf-8")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise BundleError(f"missing {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: {exc}") from None


def volume_files(volume: MultiparametricVolume) -> dict[str, bytes]:
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "channels": [c.to_json() for c in volume.channels],
    }
    return {
        HEADER_NAME: _json_bytes(header),
        DATA_NAME: volume.data.astype("<f4").tobytes(),
    }


def save_volume(volume: MultiparametricVolume, path, extra: dict[str, bytes] | None = None) -> None:
    """Write ``volume`` as an MPV bundle directory (header.json + data.raw).

    ``extra`` maps additional file names to payloads stored in the same bundle.
    """
    files = volume_files(volume)
    files.update(extra or {})
    _write_bundle(Path(path), files)


def load_volume(path) -> MultiparametricVolume:
    path = Path(path)
    header = _read_json(path / HEADER_NAME)
    raw_path = path / DATA_NAME
    if not raw_path.is_file():
        raise BundleError(f"missing {raw_path}")
    try:
        dims = _check_dims(header["dims"])
        spacing = tuple(header["spacing_mm"])
        channels = tuple(ChannelMeta.from_json(c) for c in header["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{path / HEADER_NAME}: bad header ({exc})") from None
    raw = raw_path.read_bytes()
    expected = 4 * len(channels) * math.prod(dims)
    if len(raw) != expected:
        raise BundleError(f"{raw_path}: {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    try:
        return MultiparametricVolume(dims, spacing, channels, data)
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from None


def save_labels(labelmap: LabelMap, path) -> None:
    header = {"dims": list(labelmap.dims), "legend": list(labelmap.legend)}
    _write_bundle(
        Path(path),
        {LABELS_HEADER_NAME: _json_bytes(header), LABELS_DATA_NAME: labelmap.labels.tobytes()},
    )


def load_labels(path) -> LabelMap:
    path = Path(path)
    header = _read_json(path / LABELS_HEADER_NAME)
    raw_path = path / LABELS_DATA_NAME
    if not raw_path.is_file():
        raise BundleError(f"missing {raw_path}")
    try:
        dims = _check_dims(header["dims"])
        legend = tuple(header["legend"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{path / LABELS_HEADER_NAME}: bad header ({exc})") from None
    raw = raw_path.read_bytes()
    if len(raw) != math.prod(dims):
        raise BundleError(f"{raw_path}: {len(raw)} bytes, header implies {math.prod(dims)}")
    try:
        return LabelMap(dims, np.frombuffer(raw, dtype=np.uint8), legend)
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from None


# -- normalization ------------------------------------------------------------


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * N)``-th smallest value."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = max(1, math.ceil(pct / 100.0 * flat.size))
    return float(flat[rank - 1])


def normalize_channels(
    volume: MultiparametricVolume, lower: float = 1.0, upper: float = 99.0
) -> MultiparametricVolume:
    """Clip each channel to its [lower, upper] percentile range and map it to [0, 1].

    A channel whose clipped range collapses to a point becomes all zeros.
    """
    out = np.empty_like(volume.data)
    for i, chan in enumerate(volume.data):
        lo = nearest_rank_percentile(chan, lower)
        hi = nearest_rank_percentile(chan, upper)
        if hi <= lo:
            out[i] = 0.0
        else:
            out[i] = (np.clip(chan, lo, hi) - lo) / (hi - lo)
    return volume.with_data(out)


# -- slice export -------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def _check_index(name: str, value: int, size: int) -> None:
    if not 0 <= value < size:
        raise IndexError(f"{name}={value} out of range [0, {size})")


def export_slice(volume: MultiparametricVolume, channel_index: int, z_index: int, path) -> None:
    """Write one channel slice as an 8-bit PGM, min-max scaled over the slice.

    A constant slice is written as mid-gray (128).
    """
    _check_index("channel_index", channel_index, volume.n_channels)
    _check_index("z_index", z_index, volume.dims[2])
    img = volume.data[channel_index, z_index]
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        gray = np.full(img.shape, 128, dtype=np.uint8)
    else:
        gray = np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    write_pgm(path, gray)


def label_colors(legend: Sequence[str]) -> np.ndarray:
    return np.array([PALETTE.get(name, _FALLBACK_COLOR) for name in legend], dtype=np.uint8)


def export_labels_slice(labelmap: LabelMap, z_index: int, path) -> None:
    _check_index("z_index", z_index, labelmap.dims[2])
    colors = label_colors(labelmap.legend)
    write_ppm(path, colors[labelmap.labels[z_index]])
