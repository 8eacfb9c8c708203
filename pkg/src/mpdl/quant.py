"""ADC maps, ROI statistics and Welch's two-tailed t-test."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume import (
    BundleError,
    ChannelKind,
    ChannelMeta,
    MultiparametricVolume,
    load_volume,
    save_volume,
)

__all__ = [
    "AdcMap",
    "RoiStats",
    "TTestResult",
    "compute_adc",
    "save_adc",
    "load_adc",
    "roi_stats",
    "welch_t_test",
    "betainc",
    "student_t_cdf",
    "student_t_sf2",
]

SIGNIFICANCE = 0.05
CF_TOL = 1e-10
CF_MAX_ITER = 300
_CF_TINY = 1e-300


@dataclass(frozen=True, eq=False)
class AdcMap:
    """ADC in mm^2/s per voxel, shaped ``(nz, ny, nx)``; ``valid`` marks successful fits."""

    dims: tuple[int, int, int]
    values: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def compute_adc(volume: MultiparametricVolume) -> AdcMap:
    """Fit ``ln S(b) = ln S0 - b * ADC`` per voxel by least squares over the DWI channels.

    Voxels with a nonpositive or non-finite signal on any DWI channel are
    invalid (value 0). Fits that come out negative are clamped to 0 and kept.
    """
    idx = volume.dwi_indices()
    b = np.array([volume.channels[i].b_value for i in idx], dtype=np.float64)
    if len(np.unique(b)) < 2:
        raise ValueError(f"ADC needs DWI channels at two or more distinct b-values, found {sorted(set(b))}")
    signal = volume.data[idx]  # (k, nz, ny, nx)
    valid = np.all(np.isfinite(signal) & (signal > 0), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log(np.where(valid, signal, 1.0))
    bc = b - b.mean()
    slope = np.tensordot(bc, logs - logs.mean(axis=0), axes=(0, 0)) / float(bc @ bc)
    adc = np.where(valid, np.maximum(-slope, 0.0), 0.0)
    return AdcMap(volume.dims, adc, valid, volume.spacing)


def save_adc(adc: AdcMap, path) -> None:
    vol = MultiparametricVolume(
        adc.dims, adc.spacing, (ChannelMeta("ADC", ChannelKind.OTHER),), adc.values[None]
    )
    save_volume(vol, path, extra={"valid.raw": adc.valid.astype(np.uint8).tobytes()})


def load_adc(path) -> AdcMap:
    vol = load_volume(path)
    raw = (Path(path) / "valid.raw").read_bytes()
    nx, ny, nz = vol.dims
    if len(raw) != nx * ny * nz:
        raise BundleError(f"{path}/valid.raw: {len(raw)} bytes, expected {nx * ny * nz}")
    valid = np.frombuffer(raw, dtype=np.uint8).reshape(nz, ny, nx).astype(bool)
    return AdcMap(vol.dims, vol.data[0], valid, vol.spacing)


@dataclass(frozen=True)
class RoiStats:
    n: int
    mean: float
    sd: float

    def to_json(self) -> dict:
        return asdict(self)


def roi_stats(adc: AdcMap, mask: np.ndarray) -> RoiStats:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != adc.values.shape:
        raise ValueError(f"mask shape {mask.shape} differs from map shape {adc.values.shape}")
    vals = adc.values[mask & adc.valid]
    if vals.size < 2:
        raise ValueError(f"ROI has {vals.size} valid voxels; at least 2 are needed")
    return RoiStats(n=int(vals.size), mean=float(vals.mean()), sd=float(vals.std(ddof=1)))


# -- Student t distribution ---------------------------------------------------


def _beta_cf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc needs x in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-tailed tail mass ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE

    def to_json(self) -> dict:
        return {"t": self.t, "df": self.df, "p": self.p, "significant": self.significant}


def welch_t_test(a: RoiStats, b: RoiStats) -> TTestResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite degrees of freedom."""
    if a.n < 2 or b.n < 2:
        raise ValueError("each sample needs n >= 2")
    va, vb = a.sd**2 / a.n, b.sd**2 / b.n
    se2 = va + vb
    diff = a.mean - b.mean
    if se2 == 0.0:
        if diff == 0.0:
            raise ValueError("t statistic undefined: both samples are constant with equal means")
        # Zero-variance samples with distinct means: separation is certain.
        return TTestResult(t=math.copysign(math.inf, diff), df=float(a.n + b.n - 2), p=0.0)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.n - 1) + vb**2 / (b.n - 1))
    p = min(1.0, max(0.0, student_t_sf2(t, df)))
    return TTestResult(t=t, df=df, p=p)
