"""``cats`` command line: train, predict, evaluate, phantoms, report.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.  ``CATS_NUM_THREADS`` caps BLAS/OpenMP threads.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .inference import check_window, predict_labels
from .metrics import MetricsReport, evaluate_case
from .model import CatsConfig
from .phantoms import SyntheticPhantomSpec, generate_phantoms
from .preprocess import AugmentConfig, PreprocessConfig, clip_and_normalize, resample
from .report import plot_dice_by_class, plot_loss_curve, summary_table
from .transformer import TransformerConfig
from .trainer import NonFiniteLossError, TrainConfig, read_loss_tsv, train, write_loss_tsv
from .unet import UNetConfig
from .volume_io import LabelVolume, Volume, VolumeFormatError, read_volume, write_volume

log = logging.getLogger("cats")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VOLUME_SUFFIXES = (".nii.gz", ".nii")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ------------------------------------------------------------------

def _build(cls, section: str, values: dict | None, **fixed):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field (expected one of "
                              f"{', '.join(sorted(names - set(fixed)))})")
    values.update(fixed)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _tuple_fields(d: dict, *keys) -> dict:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in d.items()}


def model_config(section: dict | None) -> CatsConfig:
    section = dict(section or {})
    preset = section.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError(f"model.preset: must be desk or full, got {preset!r}")
    allowed = {f.name for cls in (TransformerConfig, UNetConfig) for f in dataclasses.fields(cls)}
    for key in section:
        if key not in allowed:
            raise ConfigError(f"model.{key}: unknown field")
    section = _tuple_fields(section, "input_size", "tap_layers")
    try:
        return (CatsConfig.desk if preset == "desk" else CatsConfig.full)(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(doc) - {"model", "data", "preprocess", "train", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {', '.join(sorted(unknown))}")
    return doc


def _preprocess(section: dict | None, cfg: CatsConfig) -> PreprocessConfig:
    section = _tuple_fields(dict(section or {}), "target_spacing")
    return _build(PreprocessConfig, "preprocess", section, patch_size=cfg.input_size,
                  patch_multiple=cfg.transformer.patch_size)


def _train_config(section: dict | None, run_dir: Path, seed: int | None) -> TrainConfig:
    section = dict(section or {})
    aug = section.pop("augment", {})
    if aug is not None:
        aug = _build(AugmentConfig, "train.augment",
                     _tuple_fields(aug, "flip_prob", "rotations"))
    if seed is not None:
        section["seed"] = seed
    return _build(TrainConfig, "train", section, augment=aug, checkpoint_dir=str(run_dir))


# -- data ---------------------------------------------------------------------------

def _case_name(path: Path) -> str:
    for suffix in VOLUME_SUFFIXES:
        if path.name.endswith(suffix):
            return path.name[: -len(suffix)]
    return path.stem


def list_volumes(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise ConfigError(f"data directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.name.endswith(VOLUME_SUFFIXES))
    return {_case_name(p): p for p in files}


def _prepare(image: Volume, label: LabelVolume | None, pre: PreprocessConfig):
    image = clip_and_normalize(image, pre)
    if pre.target_spacing is not None:
        image = resample(image, pre.target_spacing)
        label = resample(label, pre.target_spacing) if label is not None else None
    return image, label


def load_pairs(images_dir, labels_dir, num_classes: int, pre: PreprocessConfig):
    """Matched (image, label) pairs plus the files they came from."""
    images = list_volumes(Path(images_dir))
    labels = list_volumes(Path(labels_dir))
    if not images:
        raise DataError(f"no volumes in {images_dir}")
    missing = sorted(set(images) - set(labels))
    if missing:
        raise DataError(f"no label file for case(s): {', '.join(missing)}")
    pairs, files = [], []
    for case, path in images.items():
        img = read_volume(path, "image")
        lab = read_volume(labels[case], "label", num_classes=num_classes)
        if img.shape != lab.shape:
            raise DataError(f"{case}: image extents {img.shape} != label extents {lab.shape}")
        pairs.append(_prepare(img, lab, pre))
        files += [path, labels[case]]
    return pairs, files


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: Path, resolved: dict, seed: int, files) -> Path:
    manifest = {
        "tool": "cats",
        "version": __version__,
        "seed": seed,
        "config": resolved,
        "data": [{"path": str(p), "sha256": sha256(Path(p))} for p in files],
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# -- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    doc = load_config(args.config)
    cfg = model_config(doc.get("model"))
    pre = _preprocess(doc.get("preprocess"), cfg)
    run_dir = Path(args.out or doc.get("output") or "runs/cats")
    tcfg = _train_config(doc.get("train"), run_dir, args.seed)

    data = dict(doc.get("data") or {})
    files = []
    if "phantoms" in data:
        spec = _build(SyntheticPhantomSpec, "data.phantoms",
                      _tuple_fields(data.pop("phantoms") or {}, "extents", "size_range",
                                    "kinds", "spacing"),
                      num_classes=cfg.num_classes)
        pairs = generate_phantoms(spec)
        # phantoms are already on [0, 1]
        if "intensity_mode" not in (doc.get("preprocess") or {}):
            pre = dataclasses.replace(pre, intensity_mode="none")
    else:
        for key in ("images", "labels"):
            if key not in data:
                raise ConfigError(f"data.{key}: required (or give data.phantoms)")
        pairs, files = load_pairs(data["images"], data["labels"], cfg.num_classes, pre)
    val_pairs = None
    if "val_images" in data or "val_labels" in data:
        val_pairs, val_files = load_pairs(data.get("val_images"), data.get("val_labels"),
                                          cfg.num_classes, pre)
        files += val_files

    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"model": cfg.to_dict(), "preprocess": _jsonable(pre), "train": _jsonable(tcfg),
                "data": _jsonable(doc.get("data"))}
    write_manifest(run_dir, resolved, tcfg.seed, files)
    result = train(cfg, pairs, tcfg, val_data=val_pairs, resume=args.resume,
                   meta={"preprocess": _jsonable(pre)})
    write_loss_tsv(result.history, run_dir / "loss.tsv")
    plot_loss_curve(result.history, run_dir / "loss_curve.png")
    print(f"trained {tcfg.max_steps} steps; best validation Dice {result.best_dice:.4f} "
          f"at step {result.best_step}; outputs in {run_dir}")
    return EXIT_OK


def parse_window(text: str | None):
    if text is None:
        return None
    try:
        window = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--window: expected X,Y,Z integers, got {text!r}") from None
    if len(window) != 3:
        raise ConfigError(f"--window: expected three extents, got {text!r}")
    return window


def cmd_predict(args) -> int:
    try:
        ck = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.ckpt}") from None
    if ck.config is None:
        raise CheckpointError(f"{args.ckpt}: checkpoint carries no model config")
    cfg = CatsConfig.from_dict(ck.config)
    pre_fields = _tuple_fields(ck.meta.get("preprocess") or {}, "target_spacing", "patch_size")
    pre = PreprocessConfig(**pre_fields) if pre_fields else PreprocessConfig(
        patch_size=cfg.input_size, patch_multiple=cfg.transformer.patch_size)
    window = parse_window(args.window)
    if window is not None:
        try:
            check_window(window, cfg)
        except ValueError as exc:
            raise ConfigError(f"--window: {exc}") from None
    image = read_volume(args.input, "image")
    prepared, _ = _prepare(image, None, pre)
    labels = predict_labels(prepared.data, ck.params, cfg, window, args.overlap)
    if pre.target_spacing is not None:
        back = resample(LabelVolume(labels, cfg.num_classes, prepared.spacing, prepared.affine),
                        image.spacing)
        labels = _fit(back.data, image.shape)
    write_volume(LabelVolume(labels, cfg.num_classes, image.spacing, image.affine), args.out)
    print(f"wrote {args.out} ({'x'.join(map(str, labels.shape))}, "
          f"classes present: {sorted(np.unique(labels).tolist())})")
    return EXIT_OK


def _fit(arr: np.ndarray, shape) -> np.ndarray:
    """Crop or zero-pad at the far end to an exact shape."""
    out = np.zeros(shape, dtype=arr.dtype)
    common = tuple(slice(0, min(a, b)) for a, b in zip(arr.shape, shape))
    out[common] = arr[common]
    return out


def parse_classes(text: str) -> tuple[list[int], dict[int, str]]:
    classes, names = [], {}
    for item in text.split(","):
        idx, _, name = item.strip().partition(":")
        try:
            c = int(idx)
        except ValueError:
            raise ConfigError(f"--classes: bad class index {idx!r}") from None
        classes.append(c)
        if name:
            names[c] = name
    return classes, names


def cmd_evaluate(args) -> int:
    classes, names = parse_classes(args.classes)
    preds = list_volumes(Path(args.pred))
    truths = list_volumes(Path(args.truth))
    if not truths:
        raise DataError(f"no volumes in {args.truth}")
    missing = sorted(set(truths) ^ set(preds))
    if missing:
        raise DataError(f"missing counterpart file for case(s): {', '.join(missing)}")
    report = MetricsReport(class_names=names)
    for case in sorted(truths):
        truth = read_volume(truths[case], "label")
        pred = read_volume(preds[case], "label")
        if pred.shape != truth.shape:
            raise DataError(f"{case}: extent mismatch, pred {pred.shape} vs truth {truth.shape}")
        report.records += evaluate_case(case, pred, truth, classes, truth.spacing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(report.to_tsv())
    table = summary_table(report)
    (out / "summary.txt").write_text(table)
    plot_dice_by_class(report, out / "dice_by_class.png")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_phantoms(args) -> int:
    doc = {}
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise ConfigError(f"spec file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
    spec = _build(SyntheticPhantomSpec, "spec",
                  _tuple_fields(doc, "extents", "size_range", "kinds", "spacing"))
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for i, (image, label) in enumerate(generate_phantoms(spec)):
        write_volume(image, out / "images" / f"case_{i:03d}.nii.gz")
        write_volume(label, out / "labels" / f"case_{i:03d}.nii.gz")
    print(f"wrote {spec.count} phantom(s) to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    loss, metrics = run / "loss.tsv", run / "metrics.tsv"
    if not loss.is_file() and not metrics.is_file():
        raise DataError(f"{run}: neither loss.tsv nor metrics.tsv found")
    if loss.is_file():
        plot_loss_curve(read_loss_tsv(loss), run / "loss_curve.png")
    if metrics.is_file():
        report = MetricsReport.from_tsv(metrics.read_text())
        plot_dice_by_class(report, run / "dice_by_class.png")
        sys.stdout.write(summary_table(report))
    print(f"figures written to {run}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cats", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cats {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (overrides the config's output)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="sliding-window segmentation of one volume")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--window", help="X,Y,Z tile extents (default: training patch)")
    pr.add_argument("--overlap", type=float, default=0.5)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="Dice/ASD/HD95 over matching label files")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--classes", required=True, help="e.g. 1,2 or 1:liver,2:spleen")
    e.add_argument("--out", default="evaluation")
    e.set_defaults(func=cmd_evaluate)

    ph = sub.add_parser("phantoms", help="write a synthetic labelled dataset")
    ph.add_argument("--spec", help="YAML phantom spec (defaults if omitted)")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantoms)

    r = sub.add_parser("report", help="re-render figures for a run or evaluation directory")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    raw = os.environ.get("CATS_NUM_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CATS_NUM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"cats: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VolumeFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"cats: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"cats: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cats: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
