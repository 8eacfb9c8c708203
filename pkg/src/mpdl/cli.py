"""``mpdl`` command line: one subcommand per pipeline stage.

Every command is deterministic in its flags and seeds. Reports are JSON and
never contain wall-clock times; those go to a ``timings.json`` sidecar so
reruns stay byte-identical. Failures exit nonzero with one line on stderr:
``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .eigenimage import DegenerateSignatureError, apply_filter, compute_filter, threshold_mask
from .metrics import confusion_matrix, dice, dice_masks, tissue_fractions
from .network import (
    ArchitectureMismatch,
    TrainConfig,
    init_model,
    load_model,
    predict_volume,
    save_model,
    train,
)
from .phantom import PhantomSpec, default_signatures, generate_phantom
from .quant import compute_adc, roi_stats, save_adc, welch_t_test
from .signatures import CLASS_NAMES, TissueClass, build_dataset, split_dataset
from .volume import (
    BundleError,
    ChannelKind,
    ChannelMeta,
    LabelMap,
    MultiparametricVolume,
    _json_bytes,
    export_labels_slice,
    export_slice,
    load_labels,
    load_volume,
    normalize_channels,
    save_labels,
    save_volume,
)

log = logging.getLogger("mpdl")

SEED_ENV = "MPDL_SEED"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class ReportError(Exception):
    """Failure with an explicit error category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- argument helpers -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return _seed(raw)
    except argparse.ArgumentTypeError as exc:
        raise UsageError(f"{SEED_ENV}: {exc}") from None


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be >= 0")
    return value


def _size(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"size must look like 128x128x8, got {text!r}")
    return dims  # type: ignore[return-value]


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text!r}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _fraction(text: str) -> float:
    value = _nonneg_float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"fraction must lie in (0, 1), got {text!r}")
    return value


def _threshold(text: str):
    if text == "otsu":
        return "otsu"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold must be 'otsu' or a number, got {text!r}") from None
    if not np.isfinite(value):
        raise argparse.ArgumentTypeError("threshold must be finite")
    return value


def _class_name(text: str) -> str:
    try:
        return TissueClass.from_name(text).label
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown class {text!r}; expected one of {', '.join(CLASS_NAMES)}"
        ) from None


def _class_pair(text: str) -> tuple[str, str]:
    names = tuple(_class_name(t.strip()) for t in text.split(","))
    if len(names) != 2 or names[0] == names[1]:
        raise argparse.ArgumentTypeError("--classes needs exactly two distinct class names")
    return names  # type: ignore[return-value]


def _slices(text: str, nz: int) -> list[int]:
    if text == "all":
        return list(range(nz))
    try:
        out = sorted({int(t) for t in text.split(",")})
    except ValueError:
        raise UsageError(f"--slices must be 'all' or a comma-separated list of indices, got {text!r}") from None
    bad = [z for z in out if not 0 <= z < nz]
    if bad:
        raise UsageError(f"--slices {bad} out of range for nz={nz}")
    return out


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(_json_bytes(obj))
    os.replace(tmp, path)


def _prepare_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _volume_summary(volume: MultiparametricVolume) -> dict:
    return {"dims": list(volume.dims), "channels": [c.name for c in volume.channels]}


def _check_dims(volume, labels, what="labels") -> None:
    if tuple(volume.dims) != tuple(labels.dims):
        raise ReportError("dim-mismatch", f"{what} dims {labels.dims} differ from volume dims {volume.dims}")


# -- subcommands ----------------------------------------------------------------


def cmd_phantom(args) -> dict:
    kwargs = {"seed": args.seed, "noise_pct": 0.0 if args.noiseless else args.noise}
    if args.size:
        kwargs["dims"] = args.size
    try:
        spec = PhantomSpec(**kwargs)
        volume, labels = generate_phantom(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_dir(args.out)
    save_volume(volume, out / "volume")
    save_labels(labels, out / "labels")
    _write_json(out / "spec.json", spec.to_json())
    # Class means as stored on disk (32-bit), so filters built from them null exactly.
    sigs = [
        {"class": name, "values": [float(v) for v in np.float32(sig)]}
        for name, sig in zip(CLASS_NAMES, default_signatures(spec))
    ]
    _write_json(out / "signatures.json", sigs)
    counts = np.bincount(labels.labels.ravel(), minlength=len(CLASS_NAMES))
    return {"dims": list(spec.dims), "class_counts": dict(zip(CLASS_NAMES, counts.tolist()))}


def cmd_train(args) -> dict:
    volume = load_volume(args.data)
    labels = load_labels(args.labels)
    _check_dims(volume, labels)
    normalized = normalize_channels(volume)
    dataset = split_dataset(build_dataset(normalized, labels, args.cap, args.seed), args.val_frac, args.seed)
    if len(dataset.val_idx) == 0 or len(dataset.train_idx) == 0:
        raise ReportError("data", "dataset too small for a train/validation split")
    config = TrainConfig(max_epochs=args.epochs, seed=args.seed)
    model = init_model(volume.n_channels, args.seed)
    t0 = time.perf_counter()
    model, history = train(model, dataset, config)
    elapsed = time.perf_counter() - t0
    hist = history.to_json()
    hist["config"] = {
        "seed": args.seed,
        "cap": args.cap,
        "val_frac": args.val_frac,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "learning_rate": config.hyper.learning_rate,
        "beta1": config.hyper.beta1,
        "beta2": config.hyper.beta2,
        "epsilon": config.hyper.epsilon,
        "minibatch": config.hyper.minibatch,
        "normalization": "per-channel nearest-rank 1-99 percentile clip to [0, 1]",
    }
    hist["dataset"] = {
        "class_counts": dict(zip(labels.legend, dataset.class_counts)),
        "n_train": int(len(dataset.train_idx)),
        "n_val": int(len(dataset.val_idx)),
        "empty_classes": [labels.legend[i] for i in dataset.empty_classes],
    }
    save_model(
        model,
        args.out,
        train_seed=args.seed,
        epoch=history.best_epoch,
        val_loss=history.val_loss[history.best_epoch - 1],
        extra={"history.json": _json_bytes(hist), "timings.json": _json_bytes({"train_seconds": elapsed})},
    )
    return {"epochs": history.epochs, "best_epoch": history.best_epoch}


def cmd_segment(args) -> dict:
    volume = load_volume(args.data)
    model, header = load_model(args.model)
    if model.arch.in_channels != volume.n_channels:
        raise ArchitectureMismatch(
            f"checkpoint expects {model.arch.in_channels} channels, volume has {volume.n_channels}"
        )
    slices = _slices(args.slices, volume.dims[2])
    t0 = time.perf_counter()
    seg = predict_volume(model, normalize_channels(volume))
    elapsed = time.perf_counter() - t0
    out = _prepare_dir(args.out)
    save_labels(seg, out / "labels")
    for z in slices:
        export_labels_slice(seg, z, out / f"slice_{z:03d}.ppm")
    report = {
        "command": "segment",
        "config": {"slices": slices},
        "volume": _volume_summary(volume),
        "model": {k: header.get(k) for k in ("arch", "init_seed", "train_seed", "epoch", "val_loss")},
        "tissue_fractions": _fractions_or_none(seg),
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", {"segment_seconds": elapsed})
    return {"slices": len(slices)}


def _fractions_or_none(labels: LabelMap):
    try:
        return tissue_fractions(labels).to_json()
    except ValueError:
        return None


def cmd_eval(args) -> dict:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    if pred.dims != truth.dims:
        raise ReportError("dim-mismatch", f"predicted dims {pred.dims} differ from truth dims {truth.dims}")
    legend = truth.legend if truth.n_classes >= pred.n_classes else pred.legend
    scores = [dice(pred, truth, c) for c in range(len(legend))]
    report = {
        "command": "eval",
        "legend": list(legend),
        "dice": [dict(s.to_json(), **{"class": legend[s.class_index]}) for s in scores],
        "confusion_matrix": {
            "rows": "truth",
            "columns": "predicted",
            "counts": confusion_matrix(pred, truth, len(legend)).tolist(),
        },
        "tissue_fractions": {"predicted": _fractions_or_none(pred), "truth": _fractions_or_none(truth)},
    }
    _write_json(args.out, report)
    return {"mean_dice": float(np.mean([s.value for s in scores]))}


def cmd_adc(args) -> dict:
    volume = load_volume(args.data)
    try:
        adc = compute_adc(volume)
    except ValueError as exc:
        raise ReportError("dwi", str(exc)) from None
    out = _prepare_dir(args.out)
    save_adc(adc, out / "adc")
    report: dict = {
        "command": "adc",
        "volume": _volume_summary(volume),
        "b_values": [volume.channels[i].b_value for i in volume.dwi_indices()],
        "units": "mm^2/s",
        "valid_voxels": int(adc.valid.sum()),
    }
    if args.roi_from_labels is not None:
        labels = load_labels(args.roi_from_labels)
        _check_dims(volume, labels)
        stats = {}
        for name in args.classes:
            if name not in labels.legend:
                raise UsageError(f"class {name!r} not in label legend {list(labels.legend)}")
            try:
                stats[name] = roi_stats(adc, labels.mask(labels.legend.index(name)))
            except ValueError as exc:
                raise ReportError("roi", f"{name}: {exc}") from None
        a, b = args.classes
        try:
            test = welch_t_test(stats[a], stats[b])
        except ValueError as exc:
            raise ReportError("statistics", str(exc)) from None
        report["roi"] = {name: s.to_json() for name, s in stats.items()}
        report["t_test"] = dict(test.to_json(), method="welch two-tailed", groups=[a, b])
    _write_json(out / "report.json", report)
    return {}


def _load_signatures(path: Path) -> dict[str, np.ndarray]:
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ReportError("io", f"missing signature file {path}") from None
    except json.JSONDecodeError as exc:
        raise ReportError("signatures", f"{path}: {exc}") from None
    if not isinstance(entries, list):
        raise ReportError("signatures", f"{path}: expected a JSON array of {{class, values}}")
    out: dict[str, np.ndarray] = {}
    for e in entries:
        if not isinstance(e, dict) or "class" not in e or "values" not in e:
            raise ReportError("signatures", f"{path}: every entry needs 'class' and 'values'")
        if e["class"] in out:
            raise ReportError("signatures", f"{path}: duplicate class {e['class']!r}")
        out[str(e["class"])] = np.asarray(e["values"], dtype=np.float64)
    return out


def cmd_eigen(args) -> dict:
    volume = load_volume(args.data)
    sigs = _load_signatures(args.signatures)
    if args.desired not in sigs:
        raise UsageError(f"desired class {args.desired!r} not in signature file (has {sorted(sigs)})")
    for name, v in sigs.items():
        if v.shape != (volume.n_channels,):
            raise ReportError(
                "signatures", f"signature {name!r} has length {v.size}, volume has {volume.n_channels} channels"
            )
    undesired = [name for name in sigs if name != args.desired]
    filt = compute_filter(sigs[args.desired], [sigs[n] for n in undesired])
    image = apply_filter(volume, filt)
    try:
        mask = threshold_mask(image, args.threshold)
    except ValueError as exc:
        raise ReportError("threshold", str(exc)) from None
    out = _prepare_dir(args.out)
    nx, ny, nz = volume.dims
    eig = MultiparametricVolume(
        volume.dims, volume.spacing, (ChannelMeta(f"eigen_{args.desired}", ChannelKind.OTHER),), image[None]
    )
    save_volume(eig, out / "filtered")
    save_labels(LabelMap(volume.dims, mask.astype(np.uint8), ("other", args.desired)), out / "mask")
    for z in range(nz):
        export_slice(eig, 0, z, out / f"filtered_{z:03d}.pgm")
    report: dict = {
        "command": "eigen",
        "desired": args.desired,
        "undesired": undesired,
        "weights": filt.weights.tolist(),
        "residuals": filt.residuals().tolist(),
        "threshold": args.threshold,
        "mask_voxels": int(mask.sum()),
    }
    if args.truth is not None:
        truth = load_labels(args.truth)
        _check_dims(volume, truth)
        if args.desired not in truth.legend:
            raise UsageError(f"class {args.desired!r} not in truth legend")
        idx = truth.legend.index(args.desired)
        report["dice"] = dice_masks(mask, truth.mask(idx), idx).to_json()
    _write_json(out / "report.json", report)
    return {}


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpdl", description="Multiparametric tissue-signature segmentation pipeline.")
    parser.add_argument("--version", action="version", version=f"mpdl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seed_kw = dict(type=_seed, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")

    p = sub.add_parser("phantom", help="generate a synthetic phantom with ground-truth labels")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", **seed_kw)
    p.add_argument("--size", type=_size, default=None, metavar="XxYxZ")
    p.add_argument("--noise", type=_nonneg_float, default=PhantomSpec.noise_pct, metavar="PCT")
    p.add_argument("--noiseless", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the patch CNN on a labelled volume")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", **seed_kw)
    p.add_argument("--epochs", type=_positive_int, default=TrainConfig.max_epochs)
    p.add_argument("--cap", type=_positive_int, default=2000, help="patches sampled per class")
    p.add_argument("--val-frac", type=_fraction, default=0.2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="label every voxel with a trained model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--slices", default="all", metavar="all|LIST")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="Dice, confusion matrix and tissue fractions")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adc", help="ADC map, ROI statistics and t-test")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--roi-from-labels", type=Path, default=None, metavar="DIR")
    p.add_argument("--classes", type=_class_pair, default=None, metavar="A,B")
    p.set_defaults(func=cmd_adc)

    p = sub.add_parser("eigen", help="eigenimage filter and threshold mask")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--signatures", type=Path, required=True)
    p.add_argument("--desired", type=_class_name, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=_threshold, default="otsu")
    p.add_argument("--truth", type=Path, default=None, help="label bundle for a Dice report")
    p.set_defaults(func=cmd_eigen)
    return parser


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if args.command == "adc":
            if args.classes is not None and args.roi_from_labels is None:
                raise UsageError("--classes needs --roi-from-labels")
            if args.roi_from_labels is not None and args.classes is None:
                args.classes = ("muscle", "fat_infiltrated")
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        summary = args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ReportError as exc:
        return _fail(exc.category, exc, EXIT_FAILURE)
    except ArchitectureMismatch as exc:
        return _fail("arch-mismatch", exc, EXIT_FAILURE)
    except DegenerateSignatureError as exc:
        return _fail("degenerate-signatures", exc, EXIT_FAILURE)
    except BundleError as exc:
        return _fail("bundle", exc, EXIT_FAILURE)
    except OSError as exc:
        return _fail("io", exc, EXIT_FAILURE)
    except ValueError as exc:
        category = "dim-mismatch" if "dim" in str(exc) else "value"
        return _fail(category, exc, EXIT_FAILURE)
    log.info("%s done: %s", args.command, summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
