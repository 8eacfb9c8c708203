"""Synthetic multiparametric thigh phantom with exact ground-truth labels.

Cross-section (identical on every slice): concentric ellipses giving a skin
annulus, a subcutaneous fat annulus and a muscle interior, a bone ellipse
inside the muscle, and a few fat-infiltrated ellipses scattered through the
muscle. Membership is decided at voxel centres. Each class has a mean
intensity per channel; DWI channels follow ``S0 * exp(-b * ADC)``. Gaussian
noise with sd equal to ``noise_pct`` percent of the class mean is added per
voxel and channel (``noise_pct = 0`` gives a noiseless phantom).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signatures import CLASS_NAMES, TissueClass
from .volume import ChannelKind, ChannelMeta, LabelMap, MultiparametricVolume

log = logging.getLogger(__name__)

__all__ = [
    "TissueModel",
    "PhantomSpec",
    "Ellipse",
    "PhantomGeometry",
    "default_tissues",
    "phantom_geometry",
    "rasterize",
    "generate_phantom",
    "default_signatures",
]

STATIC_CHANNELS = (
    ("t1", ChannelKind.T1),
    ("t2", ChannelKind.T2),
    ("dixon_fat", ChannelKind.DIXON),
    ("dixon_water", ChannelKind.DIXON),
)


@dataclass(frozen=True)
class TissueModel:
    """Mean T1, T2, Dixon-fat, Dixon-water intensity; DWI S0; ADC in mm^2/s."""

    static: tuple[float, float, float, float]
    s0: float
    adc: float


def default_tissues(mix: float = 0.5) -> dict[str, TissueModel]:
    muscle = TissueModel(static=(400.0, 300.0, 60.0, 800.0), s0=700.0, adc=1.46e-3)
    fat = TissueModel(static=(1100.0, 900.0, 950.0, 90.0), s0=300.0, adc=0.40e-3)
    infiltrated = TissueModel(
        static=tuple(mix * m + (1.0 - mix) * f for m, f in zip(muscle.static, fat.static)),
        s0=mix * muscle.s0 + (1.0 - mix) * fat.s0,
        adc=0.92e-3,
    )
    return {
        "background": TissueModel(static=(0.0, 0.0, 0.0, 0.0), s0=0.0, adc=0.0),
        "muscle": muscle,
        "fat": fat,
        "fat_infiltrated": infiltrated,
        "bone": TissueModel(static=(150.0, 90.0, 120.0, 60.0), s0=120.0, adc=0.20e-3),
        "skin": TissueModel(static=(650.0, 520.0, 300.0, 550.0), s0=480.0, adc=1.10e-3),
    }


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 8)
    spacing: tuple[float, float, float] = (1.0, 1.0, 5.0)
    b_values: tuple[float, ...] = (0.0, 400.0, 800.0)
    noise_pct: float = 2.0
    infiltration_mix: float = 0.5
    n_blobs: int = 6
    # geometry, as fractions of the in-plane size
    outer_axes: tuple[float, float] = (0.44, 0.38)
    skin_thickness: float = 0.025
    fat_thickness: float = 0.07
    bone_axes: tuple[float, float] = (0.08, 0.07)
    blob_radius: tuple[float, float] = (0.035, 0.06)
    seed: int = 0
    tissues: dict[str, TissueModel] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "b_values", tuple(float(b) for b in self.b_values))
        if self.tissues is None:
            object.__setattr__(self, "tissues", default_tissues(self.infiltration_mix))
        if set(self.tissues) != set(CLASS_NAMES):
            raise ValueError(f"tissues must cover exactly {CLASS_NAMES}")
        if self.noise_pct < 0 or not math.isfinite(self.noise_pct):
            raise ValueError("noise_pct must be a nonnegative number")
        if len(set(self.b_values)) < 2 or min(self.b_values) < 0:
            raise ValueError("need at least two distinct nonnegative b-values")
        if not 0.0 <= self.infiltration_mix <= 1.0:
            raise ValueError("infiltration_mix must lie in [0, 1]")
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be >= 0")

    @property
    def channels(self) -> tuple[ChannelMeta, ...]:
        static = [ChannelMeta(name, kind) for name, kind in STATIC_CHANNELS]
        dwi = [ChannelMeta(f"dwi_b{b:g}", ChannelKind.DWI, b) for b in self.b_values]
        return tuple(static + dwi)

    @property
    def noiseless(self) -> bool:
        return self.noise_pct == 0

    def to_json(self) -> dict:
        out = asdict(self)
        out["tissues"] = {name: asdict(self.tissues[name]) for name in CLASS_NAMES}
        out["channels"] = [c.to_json() for c in self.channels]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (x - self.cx) * c + (y - self.cy) * s
        v = -(x - self.cx) * s + (y - self.cy) * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass(frozen=True)
class PhantomGeometry:
    outer: Ellipse  # skin outer boundary
    fat_outer: Ellipse
    muscle_outer: Ellipse
    bone: Ellipse
    blobs: tuple[Ellipse, ...]


def phantom_geometry(spec: PhantomSpec, seed: int | None = None) -> PhantomGeometry:
    """Lay out the ellipses for ``spec``; blob placement draws from ``seed``."""
    nx, ny, _ = spec.dims
    size = min(nx, ny)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    skin = max(2.0, spec.skin_thickness * size)
    fat = max(2.0, spec.fat_thickness * size)
    a, b = spec.outer_axes[0] * nx, spec.outer_axes[1] * ny
    bone_a, bone_b = max(2.0, spec.bone_axes[0] * nx), max(2.0, spec.bone_axes[1] * ny)
    ma, mb = a - skin - fat, b - skin - fat
    if min(a, b) > min(cx, cy) + 0.5 or ma < bone_a + 4 or mb < bone_b + 4:
        raise ValueError(f"phantom geometry does not fit dims {spec.dims}")
    outer = Ellipse(cx, cy, a, b)
    fat_outer = Ellipse(cx, cy, a - skin, b - skin)
    muscle = Ellipse(cx, cy, ma, mb)
    # Bone sits off-centre, as the femur does.
    bone = Ellipse(cx + 0.15 * ma, cy - 0.1 * mb, bone_a, bone_b)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed if seed is None else seed, 1]))
    r_lo, r_hi = (max(1.5, r * size) for r in spec.blob_radius)
    blobs: list[Ellipse] = []
    attempts = 0
    while len(blobs) < spec.n_blobs:
        attempts += 1
        if attempts > 1000 * max(1, spec.n_blobs):
            # Small phantoms keep whatever fitted; none at all is an error.
            if not blobs:
                raise ValueError(f"could not place any infiltration blob in dims {spec.dims}")
            log.warning("placed %d of %d infiltration blobs in dims %s", len(blobs), spec.n_blobs, spec.dims)
            break
        ra, rb = rng.uniform(r_lo, r_hi, size=2)
        ang = rng.uniform(0.0, math.pi)
        # Sample a centre well inside the muscle ellipse.
        rad = math.sqrt(rng.uniform(0.0, 1.0))
        theta = rng.uniform(0.0, 2 * math.pi)
        reach = max(ra, rb) + 2.0
        ex, ey = ma - reach, mb - reach
        if ex <= 0 or ey <= 0:
            continue
        bx = cx + rad * ex * math.cos(theta)
        by = cy + rad * ey * math.sin(theta)
        cand = Ellipse(bx, by, ra, rb, ang)
        if _overlaps(cand, bone, 2.0) or any(_overlaps(cand, o, 1.0) for o in blobs):
            continue
        blobs.append(cand)
    return PhantomGeometry(outer, fat_outer, muscle, bone, tuple(blobs))


def _overlaps(e1: Ellipse, e2: Ellipse, margin: float) -> bool:
    # Conservative bounding-circle test.
    d = math.hypot(e1.cx - e2.cx, e1.cy - e2.cy)
    return d < max(e1.a, e1.b) + max(e2.a, e2.b) + margin


def rasterize(geometry: PhantomGeometry, nx: int, ny: int) -> np.ndarray:
    """Class index per voxel of one slice, ``(ny, nx)``."""
    y, x = np.mgrid[0:ny, 0:nx].astype(np.float64)
    labels = np.zeros((ny, nx), dtype=np.uint8)
    labels[geometry.outer.contains(x, y)] = TissueClass.SKIN
    labels[geometry.fat_outer.contains(x, y)] = TissueClass.FAT
    labels[geometry.muscle_outer.contains(x, y)] = TissueClass.MUSCLE
    for blob in geometry.blobs:
        labels[blob.contains(x, y)] = TissueClass.FAT_INFILTRATED
    labels[geometry.bone.contains(x, y)] = TissueClass.BONE
    return labels


def default_signatures(spec: PhantomSpec) -> list[np.ndarray]:
    """Noise-free signature of every class, in class order, in the phantom's channel order."""
    b = np.array(spec.b_values)
    out = []
    for name in CLASS_NAMES:
        t = spec.tissues[name]
        out.append(np.concatenate([np.array(t.static, dtype=np.float64), t.s0 * np.exp(-b * t.adc)]))
    return out


def generate_phantom(
    spec: PhantomSpec = PhantomSpec(), seed: int | None = None
) -> tuple[MultiparametricVolume, LabelMap]:
    """Rasterize the phantom and synthesize its channels; pure in ``(spec, seed)``."""
    seed = spec.seed if seed is None else seed
    nx, ny, nz = spec.dims
    geometry = phantom_geometry(spec, seed)
    labels = np.broadcast_to(rasterize(geometry, nx, ny), (nz, ny, nx))
    means = np.stack(default_signatures(spec))  # (classes, n)
    data = np.moveaxis(means[labels], -1, 0)  # (n, nz, ny, nx)
    if not spec.noiseless:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        noise = rng.standard_normal(data.shape)
        data = data + noise * (spec.noise_pct / 100.0) * data
    volume = MultiparametricVolume(spec.dims, spec.spacing, spec.channels, data)
    return volume, LabelMap(spec.dims, labels, CLASS_NAMES)
