"""Patch CNN: four 3x3 same-padded conv+ReLU layers, then FC and softmax.

Activations are kept channels-last internally, ``(B, 5, 5, C)``; each 3x3
convolution is the sum of nine shifted ``(B*25, C) @ (C, F)`` products.
Public tensors use the conventional layouts: patches ``(B, n, 5, 5)``, conv
weights ``(F, C, 3, 3)``, FC weight ``(classes, F_last * 25)`` with the
flattened feature in ``(channel, y, x)`` order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..signatures import CLASS_NAMES, N_CLASSES, PATCH_SIZE

__all__ = [
    "MPDL_FILTERS",
    "ArchitectureDescriptor",
    "ArchitectureMismatch",
    "CnnModel",
    "ForwardCache",
    "init_model",
    "zero_model",
    "forward",
    "softmax",
    "cross_entropy",
    "backward",
]

MPDL_FILTERS = (128, 64, 32, 16)
KERNEL = 3
PROB_FLOOR = 1e-12


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Layer plan. The MPDL network is the default; other filter lists exist for tests."""

    in_channels: int
    conv_filters: tuple[int, ...] = MPDL_FILTERS
    n_classes: int = N_CLASSES
    patch_size: int = PATCH_SIZE
    kernel: int = KERNEL

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ValueError("conv_filters must be a nonempty list of positive counts")
        if self.kernel != KERNEL:
            raise ValueError("only 3x3 kernels are supported")

    @property
    def is_mpdl(self) -> bool:
        return self.conv_filters == MPDL_FILTERS and self.n_classes == N_CLASSES

    @property
    def fc_inputs(self) -> int:
        return self.conv_filters[-1] * self.patch_size**2

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        c = self.in_channels
        for f in self.conv_filters:
            shapes += [(f, c, self.kernel, self.kernel), (f,)]
            c = f
        shapes += [(self.n_classes, self.fc_inputs), (self.n_classes,)]
        return shapes

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.conv_filters)):
            names += [f"conv{i + 1}.weight", f"conv{i + 1}.bias"]
        return names + ["fc.weight", "fc.bias"]

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "conv_filters": list(self.conv_filters),
            "kernel": [self.kernel, self.kernel],
            "padding": "same",
            "stride": 1,
            "activation": "relu",
            "fc_inputs": self.fc_inputs,
            "n_classes": self.n_classes,
            "classes": list(CLASS_NAMES) if self.n_classes == N_CLASSES else None,
        }


@dataclass(frozen=True, eq=False)
class CnnModel:
    arch: ArchitectureDescriptor
    params: tuple[np.ndarray, ...]
    init_seed: int | None = None

    def __post_init__(self):
        params = tuple(np.asarray(p, dtype=np.float64) for p in self.params)
        shapes = self.arch.param_shapes()
        if len(params) != len(shapes):
            raise ArchitectureMismatch(f"expected {len(shapes)} parameter tensors, got {len(params)}")
        for name, p, s in zip(self.arch.param_names(), params, shapes):
            if p.shape != s:
                raise ArchitectureMismatch(f"{name}: shape {p.shape}, expected {s}")
            if not np.all(np.isfinite(p)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "params", params)

    @property
    def conv_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params
        return [(p[2 * i], p[2 * i + 1]) for i in range(len(self.arch.conv_filters))]

    @property
    def fc_weight(self) -> np.ndarray:
        return self.params[-2]

    @property
    def fc_bias(self) -> np.ndarray:
        return self.params[-1]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def replace_params(self, params) -> "CnnModel":
        return CnnModel(self.arch, tuple(params), self.init_seed)

    def equals(self, other: "CnnModel") -> bool:
        return self.arch == other.arch and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.params, other.params)
        )


def init_model(n_channels: int, seed: int, conv_filters=MPDL_FILTERS) -> CnnModel:
    """He-uniform weights, ``U(-b, b)`` with ``b = sqrt(6 / fan_in)``; zero biases."""
    arch = ArchitectureDescriptor(in_channels=n_channels, conv_filters=conv_filters)
    rng = np.random.default_rng(seed)
    params = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=shape))
    return CnnModel(arch, tuple(params), init_seed=seed)


def zero_model(n_channels: int, conv_filters=MPDL_FILTERS) -> CnnModel:
    arch = ArchitectureDescriptor(in_channels=n_channels, conv_filters=conv_filters)
    return CnnModel(arch, tuple(np.zeros(s) for s in arch.param_shapes()))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class ForwardCache:
    model: CnnModel
    inputs: list[np.ndarray] = field(default_factory=list)  # (B, H, W, C) per conv layer
    active: list[np.ndarray] = field(default_factory=list)  # ReLU masks, (B*H*W, F)
    features: np.ndarray | None = None  # (B, fc_inputs)
    probs: np.ndarray | None = None


def _conv_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same convolution of channels-last ``x`` -> ``(B*H*W, F)`` pre-activations."""
    b, h, w, c = x.shape
    f = weight.shape[0]
    if f <= c:
        # Output-side shifts: one (B*H*W, C) @ (C, 9F) product, then nine shifted adds.
        taps = np.ascontiguousarray(weight.transpose(1, 2, 3, 0)).reshape(c, KERNEL * KERNEL * f)
        y = (x.reshape(-1, c) @ taps).reshape(b, h, w, KERNEL, KERNEL, f)
        acc = np.zeros((b, h + 2, w + 2, f))
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                acc[:, 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + w] += y[:, :, :, dy, dx]
        z = acc[:, 1:-1, 1:-1].reshape(-1, f)
    else:
        # im2col: gather the nine padded windows side by side, then one (B*H*W, 9C) @ (9C, F).
        xp = np.zeros((b, h + 2, w + 2, c))
        xp[:, 1:-1, 1:-1, :] = x
        cols = np.concatenate(
            [xp[:, dy : dy + h, dx : dx + w, :] for dy in range(KERNEL) for dx in range(KERNEL)], axis=-1
        )
        taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(KERNEL * KERNEL * c, f)
        z = cols.reshape(-1, KERNEL * KERNEL * c) @ taps
    z += bias
    return z


def forward(model: CnnModel, batch: np.ndarray, keep_cache: bool = True):
    """Class probabilities for a ``(B, n, 5, 5)`` batch.

    Returns ``(probs, cache)``; ``cache`` is None when ``keep_cache`` is False.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError(f"expected a (B, n, {PATCH_SIZE}, {PATCH_SIZE}) batch, got {batch.shape}")
    if batch.shape[1] != model.arch.in_channels:
        raise ArchitectureMismatch(
            f"batch has {batch.shape[1]} channels, model expects {model.arch.in_channels}"
        )
    b, _, h, w = batch.shape
    cache = ForwardCache(model) if keep_cache else None
    x = batch.transpose(0, 2, 3, 1)
    for weight, bias in model.conv_layers:
        x = np.ascontiguousarray(x)
        z = _conv_same(x, weight, bias)
        mask = z > 0
        if cache is not None:
            cache.inputs.append(x)
            cache.active.append(mask)
        x = np.where(mask, z, 0.0).reshape(b, h, w, -1)
    features = x.transpose(0, 3, 1, 2).reshape(b, -1)
    logits = features @ model.fc_weight.T + model.fc_bias
    probs = softmax(logits)
    if cache is not None:
        cache.features = features
        cache.probs = probs
    return probs, cache


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-log p[label]`` with ``p`` floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def backward(model: CnnModel, cache: ForwardCache, labels: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``cross_entropy(forward(model, batch), labels)`` for every parameter."""
    if cache is None or cache.model is not model or cache.probs is None:
        raise ValueError("forward cache does not belong to this model")
    labels = np.asarray(labels, dtype=np.int64)
    probs = cache.probs
    b = probs.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= model.arch.n_classes:
        raise ValueError("label out of range")

    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    grads[-2] = dlogits.T @ cache.features
    grads[-1] = dlogits.sum(axis=0)

    h = w = model.arch.patch_size
    f_last = model.arch.conv_filters[-1]
    da = (dlogits @ model.fc_weight).reshape(b, f_last, h, w).transpose(0, 2, 3, 1)
    layers = model.conv_layers
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        x = cache.inputs[i]
        c = x.shape[3]
        xp = np.zeros((b, h + 2, w + 2, c))
        xp[:, 1:-1, 1:-1, :] = x
        dz = da.reshape(-1, weight.shape[0]) * cache.active[i]
        taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
        dtaps = np.empty_like(taps)
        need_input_grad = i > 0
        dxp = np.zeros_like(xp) if need_input_grad else None
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                window = xp[:, dy : dy + h, dx : dx + w, :]
                dtaps[dy, dx] = window.reshape(-1, c).T @ dz
                if need_input_grad:
                    dxp[:, dy : dy + h, dx : dx + w, :] += (dz @ taps[dy, dx].T).reshape(b, h, w, c)
        grads[2 * i] = dtaps.transpose(3, 2, 0, 1).copy()
        grads[2 * i + 1] = dz.sum(axis=0)
        if need_input_grad:
            da = dxp[:, 1:-1, 1:-1, :]
    return grads
