"""Eigenimage filtering: a linear channel combination that passes one tissue
signature with unit gain and nulls a set of interfering signatures.

The weights are the minimum-norm solution of ``A w = e1`` where the rows of
``A`` are the desired signature followed by the undesired ones:
``w = A^T (A A^T)^+ e1``. Zero-gain constraints from all-zero signatures,
and duplicated undesired rows, are harmless; a desired signature lying in
the span of the undesired set is not.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import MultiparametricVolume

__all__ = [
    "DegenerateSignatureError",
    "EigenFilter",
    "compute_filter",
    "apply_filter",
    "otsu_threshold",
    "threshold_mask",
]

RANK_TOL = 1e-9
CONSTRAINT_TOL = 1e-9
OTSU_BINS = 256


class DegenerateSignatureError(ValueError):
    """The desired signature cannot be separated from the undesired ones."""


@dataclass(frozen=True, eq=False)
class EigenFilter:
    weights: np.ndarray
    desired: np.ndarray
    undesired: tuple[np.ndarray, ...]

    def residuals(self) -> np.ndarray:
        """Constraint residuals: ``w.d - 1`` first, then ``w.u_i`` for each undesired."""
        out = [self.weights @ self.desired - 1.0]
        out += [self.weights @ u for u in self.undesired]
        return np.array(out)


def compute_filter(desired: Sequence[float], undesired: Sequence[Sequence[float]]) -> EigenFilter:
    d = np.asarray(desired, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("desired signature must be a nonempty vector")
    rows = [np.asarray(u, dtype=np.float64) for u in undesired]
    for u in rows:
        if u.shape != d.shape:
            raise ValueError(f"signature length {u.size} differs from desired length {d.size}")
    a = np.vstack([d] + rows)
    target = np.zeros(len(a))
    target[0] = 1.0

    # Gram matrix of the constraints; symmetric PSD, pseudo-inverted with a relative rank cut.
    gram = a @ a.T
    evals, evecs = np.linalg.eigh(gram)
    scale = max(float(evals.max()), np.finfo(float).tiny)
    keep = evals > RANK_TOL * scale
    inv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    w = a.T @ (inv @ target)

    resid = a @ w - target
    if not np.all(np.abs(resid) < CONSTRAINT_TOL) or not np.all(np.isfinite(w)):
        raise DegenerateSignatureError(
            "desired signature lies in the span of the undesired signatures "
            f"(max constraint residual {np.abs(resid).max():.3g})"
        )
    return EigenFilter(weights=w, desired=d, undesired=tuple(rows))


def apply_filter(volume: MultiparametricVolume, filt: EigenFilter) -> np.ndarray:
    """Per-voxel ``sum_i w_i * channel_i``, shaped ``(nz, ny, nx)``."""
    if volume.n_channels != filt.weights.size:
        raise ValueError(f"volume has {volume.n_channels} channels, filter expects {filt.weights.size}")
    return np.tensordot(filt.weights, volume.data, axes=(0, 0))


def otsu_threshold(image: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Histogram threshold maximizing between-class variance.

    Returns the lower edge of the first bin of the upper class; the earliest
    maximizing cut wins ties.
    """
    values = np.asarray(image, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise ValueError("otsu threshold is undefined on a constant image")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    n0 = np.cumsum(hist)[:-1]  # lower-class count for a cut after bin k
    n1 = total - n0
    s0 = np.cumsum(hist * centers)[:-1]
    mean_all = float((hist * centers).sum()) / total
    valid = (n0 > 0) & (n1 > 0)
    between = np.full(n0.shape, -1.0)
    # w0 * w1 * (mean0 - mean1)^2 == n0 * (mean0 - mean_all)^2 / n1
    diff = s0[valid] / n0[valid] - mean_all
    between[valid] = n0[valid] * diff**2 / n1[valid]
    k = int(np.argmax(between))
    return float(edges[k + 1])


def threshold_mask(image: np.ndarray, method: str | float = "otsu") -> np.ndarray:
    """Binary mask ``image >= t`` with ``t`` from Otsu or given directly as a number."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown threshold method {method!r}")
        t = otsu_threshold(image)
    else:
        t = float(method)
    return image >= t
