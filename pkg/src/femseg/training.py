"""Loss, optimizer, augmentation, early stopping, and cross-validation.

The trainer consumes in-memory :class:`SubjectData` (volumes already
preprocessed), runs the class-rebalanced weighted cross-entropy through
the autodiff tape, and updates parameters with Adam at batch size one.
:func:`run_cross_validation` stitches training together with the
inference and metrics modules into the full k-fold experiment.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, backward, record, take_channel
from .data import MaskVolume, ManifestEntry, Volume, bicubic_resample, central_slab, \
    read_volume, slice_triplets, upsample_mask_nearest
from .model import ModelParams, UNetConfig, build, forward, save_checkpoint, valid_sizes

log = logging.getLogger(__name__)

_CLAMP = 1e-7

# Deterministic sub-stream labels hung off the master seed.
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_FLIP = 2
_STREAM_WINDOW = 3
_STREAM_SPLIT = 4
_STREAM_FOLD = 5


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss or gradient and was aborted."""


def _seedseq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(_seedseq(seed, *key))


def _child_seed(seed: int, *key: int) -> int:
    return int(_seedseq(seed, *key).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class LossWeights:
    """Per-sample voxel counts driving the rebalancing class weights."""

    total: int
    positive: int
    negative: int

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError(f"weights need at least one voxel, got {self.total}")
        if self.positive < 0 or self.negative < 0:
            raise ValueError("voxel counts cannot be negative")
        if self.positive + self.negative != self.total:
            raise ValueError(f"counts {self.positive} + {self.negative} != {self.total}")

    @classmethod
    def from_target(cls, y: np.ndarray) -> "LossWeights":
        positive = int(np.count_nonzero(y))
        return cls(total=int(y.size), positive=positive, negative=int(y.size) - positive)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule hyper-parameters (defaults follow the reference protocol)."""

    max_epochs: int
    learning_rate: float = 5e-5
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    stop_window: int = 10
    stop_tolerance: float = 1e-4
    warmup_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be positive, got {self.max_epochs}")
        if self.batch_size != 1:
            raise ValueError(f"this engine trains with batch size 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.stop_window < 1:
            raise ValueError(f"stop_window must be positive, got {self.stop_window}")
        if self.stop_tolerance < 0:
            raise ValueError(f"stop_tolerance cannot be negative, got {self.stop_tolerance}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs cannot be negative, got {self.warmup_epochs}")
        if self.seed < 0:
            raise ValueError(f"seed cannot be negative, got {self.seed}")


def weighted_cross_entropy(p: Tensor, y) -> Tensor:
    """Class-balanced cross-entropy over one sample's voxels.

    Returns the scalar ``-(1/N) sum[(N_b/N) y log p + (N_p/N)(1-y) log(1-p)]``.
    Each log argument is clamped to ``1e-7`` separately, so a pre-clamp
    perfect prediction scores exactly zero; gradients pass straight through
    the clamp (evaluated at the clamped value).
    """
    if not isinstance(p, Tensor):
        raise TypeError(f"weighted_cross_entropy expects a Tensor, got {type(p).__name__}")
    y = np.asarray(y)
    if y.shape != p.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be binary (0 or 1)")
    weights = LossWeights.from_target(y)
    if weights.positive == 0:
        log.debug("sample has no foreground voxels; the background term's "
                  "weight N_p/N is zero, so this sample contributes no loss")
    n = weights.total
    w_pos = weights.negative / n
    w_neg = weights.positive / n
    yf = y.astype(p.dtype)
    cp = np.maximum(p.values, _CLAMP)
    cn = np.maximum(1.0 - p.values, _CLAMP)
    value = -(w_pos * float(np.sum(yf * np.log(cp)))
              + w_neg * float(np.sum((1.0 - yf) * np.log(cn)))) / n

    def pull_p(g):
        return g * (-(w_pos * yf / cp - w_neg * (1.0 - yf) / cn) / n)

    out = Tensor(np.asarray(value, dtype=p.dtype), requires_grad=p.requires_grad)
    record(out, [(p, pull_p)])
    return out


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter name."""

    m: dict
    v: dict

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(m={name: np.zeros_like(t.values) for name, t in params.items()},
                   v={name: np.zeros_like(t.values) for name, t in params.items()})


def adam_step(params, grads, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update, applied to the parameters in place.

    ``params`` is any mapping-like with ``items()`` over (name, Tensor);
    ``grads`` maps Tensor -> gradient array (as :func:`backward` returns).
    A non-finite gradient rejects the whole step before touching any state.
    """
    if t < 1:
        raise ValueError(f"step index starts at 1, got {t}")
    resolved = []
    for name, tensor in params.items():
        if tensor not in grads:
            raise ValueError(f"no gradient supplied for parameter {name!r}")
        g = grads[tensor]
        if g.shape != tensor.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter {tensor.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                f"non-finite gradient for parameter {name!r} at step {t}; step rejected")
        resolved.append((name, tensor, g))
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, tensor, g in resolved:
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        tensor.values -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return params, state


def augment_flip(image, mask, seed, force: bool | None = None):
    """Flip image and mask together along the left-right axis, or not.

    The draw is a fair coin from ``seed``; ``force`` overrides it (the
    forced-flip mode).  A trailing channel axis on the image (slice
    triplets) is respected: the flip then runs over axis -2 of the image
    and axis -1 of the mask.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim == mask.ndim:
        img_axis = -1
    elif image.ndim == mask.ndim + 1:
        img_axis = -2
    else:
        raise ShapeError(f"image ndim {image.ndim} incompatible with mask ndim {mask.ndim}")
    if image.shape[img_axis] != mask.shape[-1]:
        raise ShapeError(f"left-right extents differ: image {image.shape[img_axis]}, "
                         f"mask {mask.shape[-1]}")
    flip = bool(np.random.default_rng(seed).random() < 0.5) if force is None else bool(force)
    if flip:
        return np.flip(image, axis=img_axis), np.flip(mask, axis=-1)
    return image, mask


def early_stop(history: Sequence[float], config: TrainConfig) -> bool:
    """True once the best of the last window stops beating the best before it.

    The window must lie entirely after the warmup epochs, so with the
    defaults (30 + 10) the earliest possible stop is epoch 40.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    w = config.stop_window
    if len(history) < config.warmup_epochs + w:
        return False
    recent = history[-w:]
    before = history[:-w]
    return bool(max(recent) - max(before) < config.stop_tolerance)


@dataclass(frozen=True)
class FoldSplit:
    """Disjoint validation folds (subject ids) plus the stratification key."""

    folds: tuple
    key: dict

    def __post_init__(self):
        all_ids = [sid for fold in self.folds for sid in fold]
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("folds overlap")
        if set(all_ids) != set(self.key):
            raise ValueError("stratification key does not cover the subject set")
        sizes = [len(fold) for fold in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes {sizes} differ by more than 1")

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, subject_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if subject_id in fold:
                return i
        raise KeyError(subject_id)


def stratified_kfold(entries: Sequence[ManifestEntry], k: int = 4, seed: int = 0) -> FoldSplit:
    """Deal subjects round-robin into k folds, shuffled within each stratum.

    The round-robin cursor continues across strata, so overall fold sizes
    differ by at most one even when strata are unbalanced.  Assignment
    depends only on the subject set and seed, not on manifest row order.
    """
    if k < 2:
        raise ValueError(f"cross-validation requires k >= 2, got k={k}")
    if len(entries) < k:
        raise ValueError(f"need at least {k} subjects for {k} folds, got {len(entries)}")
    key = {}
    for e in entries:
        if e.subject_id in key:
            raise ValueError(f"duplicate subject_id {e.subject_id!r}")
        key[e.subject_id] = e.laterality
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for side in sorted(set(key.values())):
        stratum = sorted(sid for sid, lat in key.items() if lat == side)
        for idx in rng.permutation(len(stratum)):
            folds[cursor % k].append(stratum[int(idx)])
            cursor += 1
    return FoldSplit(folds=tuple(tuple(f) for f in folds), key=key)


@dataclass
class SubjectData:
    """One subject's volumes, ready for training and evaluation.

    ``mask`` lives on the training grid; ``truth`` on the evaluation grid
    (they are the same object unless in-plane resampling was configured).
    """

    subject_id: str
    laterality: str
    image: Volume
    mask: MaskVolume
    truth: MaskVolume = None

    def __post_init__(self):
        if self.truth is None:
            self.truth = self.mask
        if self.image.values.shape != self.mask.values.shape:
            raise ShapeError(f"{self.subject_id}: image grid {self.image.values.shape} "
                             f"!= mask grid {self.mask.values.shape}")


def prepare_subject(entry: ManifestEntry, *, slab_slices: int | None = None,
                    target_xy: tuple[int, int] | None = None) -> SubjectData:
    """Load one manifest entry and apply the configured preprocessing.

    The evaluation-grid truth keeps the original in-plane extents (after
    any slab crop), per the protocol of scoring against the un-resampled
    ground truth.
    """
    image = read_volume(entry.image_path)
    mask = read_volume(entry.mask_path)
    if not isinstance(image, Volume) or image.kind != "image":
        raise ValueError(f"{entry.subject_id}: {entry.image_path} is not an image volume")
    if not isinstance(mask, MaskVolume):
        raise ValueError(f"{entry.subject_id}: {entry.mask_path} is not a mask volume")
    if image.values.shape != mask.values.shape:
        raise ShapeError(f"{entry.subject_id}: image grid {image.values.shape} "
                         f"!= mask grid {mask.values.shape}")
    if slab_slices is not None:
        image = central_slab(image, slab_slices)
        mask = central_slab(mask, slab_slices)
    truth = mask
    if target_xy is not None:
        image = bicubic_resample(image, target_xy)
        mask = upsample_mask_nearest(mask, target_xy)
    return SubjectData(entry.subject_id, entry.laterality, image, mask, truth)


@lru_cache(maxsize=None)
def _window_geometry(levels: int, extent: int) -> tuple[int, int]:
    """(input, output) extents of the largest valid window fitting ``extent``."""
    in0, out0 = valid_sizes(levels, 1)
    if extent < out0:
        raise ShapeError(f"extent {extent} is smaller than the smallest level-{levels} "
                         f"output window ({out0})")
    stride = 2 ** levels
    n_out = out0 + ((extent - out0) // stride) * stride
    return n_out + (in0 - out0), n_out


def _triplet_window(vol: Volume, slice_index: int, levels: int,
                    starts: tuple[int, int] | None, rng: np.random.Generator | None):
    """Mirror-padded input window and its output-window coordinates.

    ``starts`` pins the output-window origin (validation); otherwise the
    origin is drawn uniformly over the admissible positions with ``rng``.
    """
    triplet = slice_triplets(vol, slice_index)
    ny, nx = triplet.shape[:2]
    iy, oy = _window_geometry(levels, ny)
    ix, ox = _window_geometry(levels, nx)
    margin = (iy - oy) // 2
    if starts is not None:
        y0, x0 = starts
    else:
        y0 = int(rng.integers(0, ny - oy + 1))
        x0 = int(rng.integers(0, nx - ox + 1))
    padded = np.pad(triplet, ((margin, margin), (margin, margin), (0, 0)), mode="reflect")
    window = padded[y0:y0 + iy, x0:x0 + ix, :]
    return window, (y0, x0), (oy, ox)


def _training_pair(sub: SubjectData, slice_index: int, config: UNetConfig,
                   dtype: np.dtype, seed: int, epoch: int, visit: int):
    """(input batch, target) arrays for one training visit, flipped/windowed."""
    image, mask = augment_flip(sub.image.values, sub.mask.values,
                               _seedseq(seed, _STREAM_FLIP, epoch, visit))
    if config.rank == 3:
        x = np.ascontiguousarray(image, dtype=dtype)[None, ..., None]
        return x, np.ascontiguousarray(mask)[None, ...]
    flipped = replace(sub.image, values=np.ascontiguousarray(image))
    window, (y0, x0), (oy, ox) = _triplet_window(
        flipped, slice_index, config.levels, None,
        _rng(seed, _STREAM_WINDOW, epoch, visit))
    x = np.ascontiguousarray(window, dtype=dtype)[None]
    y = np.ascontiguousarray(mask[slice_index, y0:y0 + oy, x0:x0 + ox])[None, ...]
    return x, y


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def validation_accuracy(params: ModelParams, config: UNetConfig,
                        subjects: Sequence[SubjectData], dtype) -> float:
    """Voxel classification accuracy at threshold 0.5, pooled over subjects.

    The 3D network scores whole volumes; the 2D network scores the largest
    centered valid window of every slice (full slices when the in-plane
    extents are themselves admissible outputs).
    """
    correct = 0
    total = 0
    for sub in subjects:
        if config.rank == 3:
            x = np.ascontiguousarray(sub.image.values, dtype=dtype)[None, ..., None]
            prob = forward(params, config, Tensor(x)).values[0, ..., 1]
            pred = prob > 0.5
            truth = sub.mask.values.astype(bool)
        else:
            nz, ny, nx = sub.image.values.shape
            iy, oy = _window_geometry(config.levels, ny)
            ix, ox = _window_geometry(config.levels, nx)
            y0, x0 = (ny - oy) // 2, (nx - ox) // 2
            windows = np.stack([
                _triplet_window(sub.image, s, config.levels, (y0, x0), None)[0]
                for s in range(nz)])
            chunk = max(1, int(4e6) // (iy * ix * 3))
            preds = []
            for lo, hi in _batched(nz, chunk):
                x = np.ascontiguousarray(windows[lo:hi], dtype=dtype)
                preds.append(forward(params, config, Tensor(x)).values[..., 1] > 0.5)
            pred = np.concatenate(preds, axis=0)
            truth = sub.mask.values[:, y0:y0 + oy, x0:x0 + ox].astype(bool)
        correct += int(np.count_nonzero(pred == truth))
        total += truth.size
    return correct / total


@dataclass
class TrainResult:
    """A trained model plus its per-epoch trace."""

    params: ModelParams
    history: list
    train_losses: list
    best_epoch: int
    best_accuracy: float
    epochs_run: int
    stopped_early: bool


def _check_training_setup(model_config: UNetConfig, train_subjects, val_subjects):
    if not train_subjects:
        raise ValueError("no training subjects")
    if not val_subjects:
        raise ValueError("no validation subjects")
    if model_config.classes != 2:
        raise ValueError("the segmentation trainer is binary; configure classes=2")
    expected_channels = 3 if model_config.rank == 2 else 1
    source = "slice triplets" if model_config.rank == 2 else "single-channel volumes"
    if model_config.in_channels != expected_channels:
        raise ValueError(f"the {model_config.rank}D network consumes {source}; "
                         f"configure in_channels={expected_channels}")


def train_model(train_subjects: Sequence[SubjectData], val_subjects: Sequence[SubjectData],
                model_config: UNetConfig, train_config: TrainConfig, *,
                dtype=np.float64, log_path=None) -> TrainResult:
    """Train one model; returns the best-validation-epoch parameters.

    "Best" ties break toward the most recent epoch.  One epoch visits
    every sample (subject for 3D, subject x slice for 2D) once in seeded
    shuffled order.  The per-epoch CSV log goes to ``log_path`` when
    given.  Everything random derives from ``train_config.seed``, so a
    run is bit-reproducible in 64-bit mode.
    """
    dtype = np.dtype(dtype)
    _check_training_setup(model_config, train_subjects, val_subjects)
    params = build(model_config, seed=_child_seed(train_config.seed, _STREAM_INIT),
                   dtype=dtype)
    state = AdamState.zeros(params)

    if model_config.rank == 3:
        samples = [(i, -1) for i in range(len(train_subjects))]
    else:
        samples = [(i, s) for i, sub in enumerate(train_subjects)
                   for s in range(sub.image.values.shape[0])]

    history: list[float] = []
    train_losses: list[float] = []
    best_acc = -math.inf
    best_epoch = 0
    best_values = params.copy_values()
    stopped = False
    step = 0

    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "train_loss", "val_accuracy", "wall_time_s"])
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            tic = time.perf_counter()
            order = _rng(train_config.seed, _STREAM_SHUFFLE, epoch).permutation(len(samples))
            loss_sum = 0.0
            for visit, pos in enumerate(order):
                subject_index, slice_index = samples[int(pos)]
                x, y = _training_pair(train_subjects[subject_index], slice_index,
                                      model_config, dtype, train_config.seed, epoch, visit)
                with Tape() as tape:
                    prob = forward(params, model_config, Tensor(x))
                    loss = weighted_cross_entropy(take_channel(prob, 1), y)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, "
                                           f"visit {visit}")
                grads = backward(tape, loss)
                step += 1
                adam_step(params, grads, state, step, train_config)
                loss_sum += loss_value
            mean_loss = loss_sum / len(samples)
            acc = validation_accuracy(params, model_config, val_subjects, dtype)
            history.append(acc)
            train_losses.append(mean_loss)
            # ">=" keeps the newest checkpoint among ties: voxel accuracy is
            # computed on thresholded maps and often plateaus exactly while
            # the soft probabilities are still sharpening.
            if acc >= best_acc:
                best_acc = acc
                best_epoch = epoch
                best_values = params.copy_values()
            wall = time.perf_counter() - tic
            if writer is not None:
                writer.writerow([epoch, repr(mean_loss), repr(acc), f"{wall:.3f}"])
                log_file.flush()
            log.info("epoch %d: train_loss=%.6f val_accuracy=%.6f wall=%.2fs",
                     epoch, mean_loss, acc, wall)
            if early_stop(history, train_config):
                stopped = True
                log.info("early stop after epoch %d (best %.6f at epoch %d)",
                         epoch, best_acc, best_epoch)
                break
    finally:
        if log_file is not None:
            log_file.close()
    params.load_values(best_values)
    return TrainResult(params=params, history=history, train_losses=train_losses,
                       best_epoch=best_epoch, best_accuracy=best_acc,
                       epochs_run=len(history), stopped_early=stopped)


@dataclass
class FoldOutcome:
    """Everything one fold produced: model, threshold, curves, metrics rows."""

    fold: int
    result: TrainResult
    threshold: float
    auc: float
    average_precision: float
    curve: object


@dataclass
class CrossValidationResult:
    split: FoldSplit
    outcomes: list
    report: object
    raw_report: object
    post_process: bool
    files: list


def _eval_pair(pred: MaskVolume, sub: SubjectData) -> tuple[MaskVolume, MaskVolume]:
    """Carry a prediction to the evaluation grid next to its truth."""
    tz, ty, tx = sub.truth.values.shape
    if pred.values.shape != (tz, ty, tx):
        pred = upsample_mask_nearest(pred, (tx, ty))
    return pred, sub.truth


def run_cross_validation(entries: Sequence[ManifestEntry], model_config: UNetConfig,
                         train_config: TrainConfig, *, k: int = 4, dtype=np.float64,
                         post_process: bool = False, slab_slices: int | None = None,
                         target_xy: tuple[int, int] | None = None,
                         out_dir=None) -> CrossValidationResult:
    """The full k-fold experiment: train, predict, choose thresholds, report.

    Each fold trains on the other folds' subjects, pools its validation
    probability maps into ROC/PR curves, takes the PR point closest to
    (1, 1) as its operating threshold, and scores every validation subject
    at that threshold (optionally after largest-component filtering).
    Artifacts (report, per-fold curves and checkpoints, epoch logs, SVG
    plots) land under ``out_dir`` when given.
    """
    from . import inference, metrics

    dtype = np.dtype(dtype)
    _check_training_setup(model_config, entries, entries)
    split = stratified_kfold(entries, k=k, seed=_child_seed(train_config.seed, _STREAM_SPLIT))
    subjects = {e.subject_id: prepare_subject(e, slab_slices=slab_slices,
                                              target_xy=target_xy)
                for e in entries}

    out_dir = Path(out_dir) if out_dir is not None else None
    files: list[Path] = []
    outcomes: list[FoldOutcome] = []
    raw_rows = []
    final_rows = []

    for i, fold_ids in enumerate(split.folds):
        val = [subjects[sid] for sid in fold_ids]
        train = [subjects[sid] for j, ids in enumerate(split.folds) if j != i
                 for sid in ids]
        fold_cfg = replace(train_config, seed=_child_seed(train_config.seed, _STREAM_FOLD, i))
        log_path = None
        if out_dir is not None:
            fold_dir = out_dir / f"fold{i}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            log_path = fold_dir / "epochs.csv"
        log.info("fold %d: training on %d subjects, validating on %d",
                 i, len(train), len(val))
        try:
            result = train_model(train, val, model_config, fold_cfg,
                                 dtype=dtype, log_path=log_path)
        except (TrainingDiverged, FloatingPointError) as err:
            raise TrainingDiverged(f"fold {i} failed to train: {err}") from err

        pairs = [(sub, inference.predict(result.params, model_config, sub.image))
                 for sub in val]
        curve_input = [(prob, sub.mask) for sub, prob in pairs]
        roc = metrics.roc_curve(curve_input)
        prc = metrics.pr_curve(curve_input)
        threshold = metrics.optimal_threshold(prc)
        log.info("fold %d: threshold %.4f, AUC %.4f, AP %.4f",
                 i, threshold, roc.auc, prc.average_precision)

        for sub, prob in pairs:
            pred = inference.binarize(prob, threshold)
            raw_rows.append(metrics.subject_row(
                sub.subject_id, i, threshold, *_eval_pair(pred, sub)))
            if post_process:
                cleaned = inference.largest_component(pred)
                final_rows.append(metrics.subject_row(
                    sub.subject_id, i, threshold, *_eval_pair(cleaned, sub)))
            else:
                final_rows.append(raw_rows[-1])

        outcomes.append(FoldOutcome(fold=i, result=result, threshold=threshold,
                                    auc=roc.auc, average_precision=prc.average_precision,
                                    curve=prc))
        if out_dir is not None:
            ckpt = out_dir / f"fold{i}" / "model.ckpt"
            save_checkpoint(ckpt, model_config, result.params)
            files += [ckpt, log_path]
            curve_path = out_dir / "curves" / f"fold{i}.csv"
            curve_path.parent.mkdir(parents=True, exist_ok=True)
            metrics.write_curve_csv(curve_path, metrics.curve_on_grid(prc))
            files.append(curve_path)

    fold_aucs = [o.auc for o in outcomes]
    fold_aps = [o.average_precision for o in outcomes]
    thresholds = [o.threshold for o in outcomes]
    report = metrics.build_report(final_rows, fold_aucs, fold_aps, thresholds)
    raw_report = report if not post_process else metrics.build_report(
        raw_rows, fold_aucs, fold_aps, thresholds)
    label = f"{model_config.rank}D CNN, F:{model_config.features}, L:{model_config.levels}"

    if out_dir is not None:
        report_txt = out_dir / "report.txt"
        report_txt.write_text(metrics.results_table_text({label: report}), encoding="utf-8")
        report_csv = out_dir / "report.csv"
        metrics.write_report_csv(report_csv, report)
        files += [report_txt, report_csv]
        mean_path = out_dir / "curves" / "mean.csv"
        fold_grids = [metrics.curve_on_grid(o.curve) for o in outcomes]
        mean_curve = metrics.grid_average(fold_grids)
        metrics.write_curve_csv(mean_path, mean_curve)
        files.append(mean_path)
        for kind in ("roc", "prc"):
            svg = out_dir / "curves" / f"{kind}.svg"
            metrics.render_curves_svg(svg, fold_grids, mean_curve,
                                      kind=kind, label=label)
            files.append(svg)
    return CrossValidationResult(split=split, outcomes=outcomes, report=report,
                                 raw_report=raw_report, post_process=post_process,
                                 files=files)
