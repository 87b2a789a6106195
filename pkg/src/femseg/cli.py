"""Command-line entry point: femseg phantom | train | infer | eval | cv | curves.

Every command writes its artifacts under an output directory together with
``run.json``, a reproducibility record holding the effective configuration,
the seed, the package version, and the list of produced files.  Exit codes:
0 on success, 2 for usage or configuration errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from collections import OrderedDict
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import __version__, inference, metrics
from .autodiff import Tensor
from .data import (
    ManifestEntry,
    MaskVolume,
    Volume,
    generate_phantom,
    load_manifest,
    read_volume,
    save_manifest,
    write_volume,
)
from .model import ModelParams, UNetConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, prepare_subject, run_cross_validation, train_model

log = logging.getLogger(__name__)

VOLUME_SUFFIX = ".fsv"

_PRECISION_DTYPES = {"f32": np.float32, "f64": np.float64}

# Architecture defaults per rank follow the headline configurations
# (first-level features F and pooling levels L); padding is tied to rank.
_MODEL_DEFAULTS = {
    3: dict(in_channels=1, classes=2, features=32, levels=4, padding="same"),
    2: dict(in_channels=3, classes=2, features=64, levels=4, padding="valid"),
}
_MODEL_KEYS = {"rank", "in_channels", "classes", "features", "levels", "padding"}
_TRAIN_KEYS = {"max_epochs", "learning_rate", "batch_size", "beta1", "beta2",
               "epsilon", "stop_window", "stop_tolerance", "warmup_epochs", "seed"}
_TOP_KEYS = {"manifest", "out", "model", "train", "folds", "post_process",
             "precision", "slab_slices", "target_xy", "validation_ids"}

DEFAULT_MAX_EPOCHS = 1000   # early stopping is the effective stop


class ConfigError(ValueError):
    """A run-config or flag value violates the schema."""


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _int_field(value, name: str, minimum: int):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def load_run_config(path) -> dict:
    """Parse, schema-check, and default-fill a JSON run configuration."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "run config")

    model_section = raw.get("model", {})
    if not isinstance(model_section, dict):
        raise ConfigError("'model' must be an object")
    _reject_unknown(model_section, _MODEL_KEYS, "'model'")
    rank = model_section.get("rank", 3)
    if rank not in (2, 3):
        raise ConfigError(f"model.rank must be 2 or 3, got {rank!r}")
    merged = dict(_MODEL_DEFAULTS[rank])
    merged.update({k: v for k, v in model_section.items() if k != "rank"})
    try:
        model = UNetConfig(rank=rank, **merged)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid 'model' section: {err}") from None

    train_section = raw.get("train", {})
    if not isinstance(train_section, dict):
        raise ConfigError("'train' must be an object")
    _reject_unknown(train_section, _TRAIN_KEYS, "'train'")
    train_merged = {"max_epochs": DEFAULT_MAX_EPOCHS}
    train_merged.update(train_section)
    try:
        train = TrainConfig(**train_merged)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid 'train' section: {err}") from None

    folds = _int_field(raw.get("folds", 4), "folds", 2)

    post_process = raw.get("post_process")
    if post_process is not None and not isinstance(post_process, bool):
        raise ConfigError(f"post_process must be true, false, or null, "
                          f"got {post_process!r}")

    precision = raw.get("precision", "f64")
    if precision not in _PRECISION_DTYPES:
        raise ConfigError(f"precision must be 'f32' or 'f64', got {precision!r}")

    slab_slices = raw.get("slab_slices")
    if slab_slices is not None:
        slab_slices = _int_field(slab_slices, "slab_slices", 1)

    target_xy = raw.get("target_xy")
    if target_xy is not None:
        if (not isinstance(target_xy, (list, tuple)) or len(target_xy) != 2):
            raise ConfigError(f"target_xy must be [x, y], got {target_xy!r}")
        target_xy = tuple(_int_field(v, "target_xy entry", 2) for v in target_xy)

    validation_ids = raw.get("validation_ids", [])
    if (not isinstance(validation_ids, list)
            or not all(isinstance(v, str) for v in validation_ids)):
        raise ConfigError("validation_ids must be a list of subject id strings")

    manifest = raw.get("manifest")
    if manifest is not None and not isinstance(manifest, str):
        raise ConfigError(f"manifest must be a path string, got {manifest!r}")
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"out must be a path string, got {out!r}")

    return {
        "manifest": manifest, "out": out, "model": model, "train": train,
        "folds": folds, "post_process": post_process, "precision": precision,
        "slab_slices": slab_slices, "target_xy": target_xy,
        "validation_ids": validation_ids,
        # resolve paths relative to the config file, like manifests do
        "base_dir": path.parent,
    }


def _resolve(base_dir: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base_dir / p


def _effective_post_process(setting, model: UNetConfig) -> bool:
    """Post-processing defaults on for the 2D network, off for the 3D one."""
    return (model.rank == 2) if setting is None else setting


def _write_record(out_dir: Path, command: str, config: dict, files,
                  seed=None, precision=None) -> Path:
    """The reproducibility record: config, seed, version, produced files."""
    rel = sorted({Path(os.path.relpath(Path(f), out_dir)).as_posix()
                  for f in files})
    record = {"command": command, "config": config, "files": rel,
              "precision": precision, "seed": seed, "version": __version__}
    record_path = out_dir / "run.json"
    record_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    return record_path


def _cast_params(params: ModelParams, dtype) -> ModelParams:
    if params.dtype == dtype:
        return params
    return ModelParams(OrderedDict(
        (name, Tensor(t.values.astype(dtype))) for name, t in params.items()))


def _int_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}")


def _float_triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z numbers, got {text!r}")


def _cmd_phantom(args) -> int:
    """Generate a synthetic cohort: volumes, masks, and a manifest."""
    count = args.count
    if count < 1:
        raise ConfigError(f"--count must be positive, got {count}")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, files = [], []
    for i in range(count):
        subject_seed = int(np.random.SeedSequence((seed, i)).generate_state(
            1, np.uint64)[0])
        image, mask, side = generate_phantom(
            seed=subject_seed, extents_xyz=args.extents,
            difficulty=args.difficulty, spacing_mm_xyz=args.spacing)
        subject_id = f"s{i:03d}"
        image_path = out / f"{subject_id}_img{VOLUME_SUFFIX}"
        mask_path = out / f"{subject_id}_msk{VOLUME_SUFFIX}"
        write_volume(image_path, image)
        write_volume(mask_path, mask)
        files += [image_path, mask_path]
        entries.append(ManifestEntry(subject_id=subject_id,
                                     image_path=image_path.name,
                                     mask_path=mask_path.name,
                                     laterality=side))
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, entries)
    files.append(manifest_path)
    _write_record(out, "phantom",
                  {"count": count, "extents_xyz": list(args.extents),
                   "difficulty": args.difficulty,
                   "spacing_mm_xyz": list(args.spacing)},
                  files, seed=seed)
    print(f"wrote {count} subjects to {out}")
    return 0


def _load_cv_config(args, *, need_manifest: bool):
    """Shared train/cv plumbing: config file plus flag overrides."""
    cfg = load_run_config(args.config)
    if need_manifest and not cfg["manifest"]:
        raise ConfigError("run config must set 'manifest'")
    if not (args.out or cfg["out"]):
        raise ConfigError("output directory required (--out or config 'out')")
    out = Path(args.out) if args.out else _resolve(cfg["base_dir"], cfg["out"])
    precision = args.precision or cfg["precision"]
    train = cfg["train"]
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    manifest_path = (_resolve(cfg["base_dir"], cfg["manifest"])
                     if cfg["manifest"] else None)
    return cfg, manifest_path, out, precision, train


def _record_config(cfg, manifest_path, train: TrainConfig, post=None) -> dict:
    record = {
        "manifest": str(manifest_path),
        "model": dataclasses.asdict(cfg["model"]),
        "train": dataclasses.asdict(train),
        "slab_slices": cfg["slab_slices"],
        "target_xy": list(cfg["target_xy"]) if cfg["target_xy"] else None,
    }
    if post is not None:
        record["folds"] = cfg["folds"]
        record["post_process"] = post
    return record


def _cmd_train(args) -> int:
    """Train one model on a manifest with an explicit validation holdout."""
    cfg, manifest_path, out, precision, train_cfg = _load_cv_config(
        args, need_manifest=True)
    val_ids = cfg["validation_ids"]
    if not val_ids:
        raise ConfigError("'validation_ids' must name at least one held-out "
                          "subject (early stopping tracks validation accuracy)")
    entries = load_manifest(manifest_path)
    known = {e.subject_id for e in entries}
    missing = sorted(set(val_ids) - known)
    if missing:
        raise ConfigError(f"validation_ids not in manifest: {', '.join(missing)}")
    subjects = {e.subject_id: prepare_subject(e, slab_slices=cfg["slab_slices"],
                                              target_xy=cfg["target_xy"])
                for e in entries}
    held_out = set(val_ids)
    val = [subjects[sid] for sid in val_ids]
    train_subjects = [s for sid, s in subjects.items() if sid not in held_out]
    if not train_subjects:
        raise ConfigError("no training subjects left after the validation holdout")

    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "epochs.csv"
    result = train_model(train_subjects, val, cfg["model"], train_cfg,
                         dtype=_PRECISION_DTYPES[precision], log_path=log_path)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, cfg["model"], result.params)
    config_record = _record_config(cfg, manifest_path, train_cfg)
    config_record["validation_ids"] = list(val_ids)
    _write_record(out, "train", config_record, [log_path, ckpt],
                  seed=train_cfg.seed, precision=precision)
    print(f"trained {result.epochs_run} epochs "
          f"({'stopped early' if result.stopped_early else 'ran to max_epochs'}); "
          f"best epoch {result.best_epoch} "
          f"validation accuracy {result.best_accuracy:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_infer(args) -> int:
    """Predict probability maps (and optionally masks) for stored volumes."""
    config, params = load_checkpoint(args.checkpoint)
    if args.precision:
        params = _cast_params(params, _PRECISION_DTYPES[args.precision])
    post = _effective_post_process(args.post_process, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for image_arg in args.image:
        vol = read_volume(image_arg)
        if not isinstance(vol, Volume):
            raise ValueError(f"{image_arg}: expected an image volume, got a mask")
        start = time.perf_counter()
        prob = inference.predict(params, config, vol)
        elapsed = time.perf_counter() - start
        stem = Path(image_arg).stem
        map_path = out / f"{stem}_map{VOLUME_SUFFIX}"
        write_volume(map_path, prob)
        files.append(map_path)
        print(f"{Path(image_arg).name}: {elapsed:.2f} s")
        if args.threshold is not None:
            mask = inference.binarize(prob, args.threshold)
            if post:
                mask = inference.largest_component(mask)
            mask_path = out / f"{stem}_mask{VOLUME_SUFFIX}"
            write_volume(mask_path, mask)
            files.append(mask_path)
    _write_record(out, "infer",
                  {"checkpoint": str(args.checkpoint),
                   "images": [str(p) for p in args.image],
                   "threshold": args.threshold, "post_process": post},
                  files, precision=args.precision)
    return 0


def _subject_key(path: Path) -> str:
    """Filename stem with the role suffix (_img/_map/_msk/_mask) stripped."""
    stem = path.stem
    for suffix in ("_img_map", "_img", "_map", "_msk", "_mask"):
        if stem.endswith(suffix):
            return stem[:-len(suffix)]
    return stem


def _cmd_eval(args) -> int:
    """Score stored probability maps against ground-truth masks."""
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    candidates = sorted(p for p in pred_dir.glob(f"*{VOLUME_SUFFIX}")
                        if p.is_file())
    # In mixed directories, role suffixes disambiguate: maps on the
    # prediction side, masks on the truth side.
    maps = [p for p in candidates if p.stem.endswith("_map")]
    pred_files = maps or candidates
    if not pred_files:
        raise ValueError(f"no {VOLUME_SUFFIX} volumes found in {pred_dir}")
    truth_candidates = sorted(p for p in truth_dir.glob(f"*{VOLUME_SUFFIX}")
                              if p.is_file())
    masks = [p for p in truth_candidates if p.stem.endswith(("_msk", "_mask"))]
    truths = {}
    for truth_path in (masks or truth_candidates):
        key = _subject_key(truth_path)
        if key in truths:
            raise ValueError(f"{truth_dir}: multiple truth volumes for "
                             f"subject {key!r}")
        truths[key] = truth_path
    pairs = []
    for pred_path in pred_files:
        key = _subject_key(pred_path)
        if key not in truths:
            raise ValueError(f"no matching truth volume for {pred_path.name} "
                             f"(subject {key!r}) in {truth_dir}")
        prob = read_volume(pred_path)
        truth = read_volume(truths[key])
        if not isinstance(prob, Volume):
            raise ValueError(f"{pred_path}: predictions must be probability maps")
        if not isinstance(truth, MaskVolume):
            raise ValueError(f"{truths[key]}: ground truth must be a mask")
        pairs.append((key, prob, truth))

    curve_input = [(prob, truth) for _, prob, truth in pairs]
    roc = metrics.roc_curve(curve_input)
    prc = metrics.pr_curve(curve_input)
    optimal = metrics.optimal_threshold(prc)
    threshold = args.threshold if args.threshold is not None else optimal
    rows = [metrics.subject_row(stem, 0, threshold,
                                inference.binarize(prob, threshold), truth)
            for stem, prob, truth in pairs]
    report = metrics.build_report(rows, [roc.auc], [prc.average_precision],
                                  [threshold])

    out = Path(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    label = f"evaluation of {pred_dir.name}"
    table = metrics.results_table_text({label: report})
    report_txt = out / "report.txt"
    report_txt.write_text(table, encoding="utf-8")
    report_csv = out / "report.csv"
    metrics.write_report_csv(report_csv, report)
    roc_csv = out / "curves" / "roc.csv"
    prc_csv = out / "curves" / "prc.csv"
    metrics.write_curve_csv(roc_csv, metrics.curve_on_grid(roc))
    metrics.write_curve_csv(prc_csv, metrics.curve_on_grid(prc))
    _write_record(out, "eval",
                  {"pred": str(pred_dir), "truth": str(truth_dir),
                   "threshold": threshold},
                  [report_txt, report_csv, roc_csv, prc_csv])
    print(f"optimal threshold: {optimal:.6f}")
    if args.threshold is not None:
        print(f"scoring at requested threshold: {threshold:.6f}")
    print(f"AUC: {roc.auc:.6f}")
    print(f"AP: {prc.average_precision:.6f}")
    print()
    print(table, end="")
    return 0


def _cmd_cv(args) -> int:
    """The full stratified cross-validation experiment."""
    cfg, manifest_path, out, precision, train_cfg = _load_cv_config(
        args, need_manifest=True)
    post = _effective_post_process(cfg["post_process"], cfg["model"])
    entries = load_manifest(manifest_path)
    result = run_cross_validation(
        entries, cfg["model"], train_cfg, k=cfg["folds"],
        dtype=_PRECISION_DTYPES[precision], post_process=post,
        slab_slices=cfg["slab_slices"], target_xy=cfg["target_xy"], out_dir=out)
    _write_record(out, "cv",
                  _record_config(cfg, manifest_path, train_cfg, post=post),
                  result.files, seed=train_cfg.seed, precision=precision)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def _cmd_curves(args) -> int:
    """Render stored curve CSVs (per-fold plus their mean) as an SVG plot."""
    curves = [metrics.read_curve_csv(p) for p in args.csv]
    mean = metrics.grid_average(curves)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    svg = out / f"{args.kind}.svg"
    metrics.render_curves_svg(svg, curves, mean, kind=args.kind,
                              label=args.label or "")
    _write_record(out, "curves",
                  {"csv": [str(p) for p in args.csv], "kind": args.kind,
                   "label": args.label},
                  [svg])
    print(f"wrote {svg}")
    return 0


_DISPATCH = {
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "curves": _cmd_curves,
}


def build_parser() -> argparse.ArgumentParser:
    threads_parent = argparse.ArgumentParser(add_help=False)
    threads_parent.add_argument("--threads", type=int, default=None,
                                help="BLAS thread cap (or FEMSEG_THREADS)")
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=None,
                             help="master seed override")
    precision_parent = argparse.ArgumentParser(add_help=False)
    precision_parent.add_argument("--precision", choices=sorted(_PRECISION_DTYPES),
                                  default=None, help="floating-point width")

    parser = argparse.ArgumentParser(
        prog="femseg",
        description="Proximal femur segmentation: training, inference, "
                    "and evaluation on volumetric MR data.")
    parser.add_argument("--version", action="version",
                        version=f"femseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("phantom", parents=[threads_parent, seed_parent],
                       help="generate a synthetic cohort with a manifest")
    p.add_argument("--out", required=True, help="cohort output directory")
    p.add_argument("--count", type=int, default=20, help="number of subjects")
    p.add_argument("--extents", type=_int_triple, default=(64, 64, 32),
                   metavar="X,Y,Z", help="volume extents in voxels")
    p.add_argument("--difficulty", type=float, default=0.35,
                   help="blur/noise level in [0, 1]")
    p.add_argument("--spacing", type=_float_triple, default=(1.0, 1.0, 1.5),
                   metavar="X,Y,Z", help="voxel spacing in mm")

    p = sub.add_parser("train", parents=[threads_parent, seed_parent,
                                         precision_parent],
                       help="train one model with a validation holdout")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("infer", parents=[threads_parent, precision_parent],
                       help="predict probability maps for stored volumes")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--image", action="append", required=True,
                   help="input volume (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="also write binary masks at this threshold")
    p.add_argument("--post-process", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="largest-component filter (default: on for 2D models)")

    p = sub.add_parser("eval", parents=[threads_parent],
                       help="score probability maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of probability maps")
    p.add_argument("--truth", required=True, help="directory of truth masks "
                                                  "(matching filenames)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="score at this threshold instead of the PR-optimal one")

    p = sub.add_parser("cv", parents=[threads_parent, seed_parent,
                                      precision_parent],
                       help="run the full stratified cross-validation experiment")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("curves", parents=[threads_parent],
                       help="render curve CSVs as an SVG plot")
    p.add_argument("--csv", action="append", required=True,
                   help="curve CSV as written by cv/eval (repeatable)")
    p.add_argument("--kind", choices=["roc", "prc"], default="prc",
                   help="which curve the CSVs hold")
    p.add_argument("--label", default=None, help="plot title")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _thread_limit(args) -> int | None:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("FEMSEG_THREADS")
        if not env:
            return None
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"FEMSEG_THREADS must be an integer, got {env!r}")
    if threads < 1:
        raise ConfigError(f"thread count must be positive, got {threads}")
    return threads


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse handles --help/--version and usage errors
        return 0 if exc.code in (0, None) else int(exc.code)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("femseg: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with ExitStack() as stack:
            limit = _thread_limit(args)
            if limit is not None:
                from threadpoolctl import threadpool_limits
                stack.enter_context(threadpool_limits(limits=limit))
            return _DISPATCH[args.command](args)
    except ConfigError as err:
        print(f"femseg: config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # CLI boundary: report, don't traceback
        print(f"femseg: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
