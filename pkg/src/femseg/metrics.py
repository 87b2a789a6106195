"""Confusion counts, overlap metrics, ROC/PR curves, and report emission.

Curves are computed over the pooled voxels of all supplied subjects with
thresholds swept over the distinct predicted probabilities plus the 0 and
1 sentinels, predictions counted under strict ``score > threshold``.  The
sweep lives in parallel numpy arrays (pooled sweeps reach millions of
distinct thresholds); :attr:`Curve.points` materializes dataclass points
for hand-sized curves.  Reports aggregate per-subject metrics as
mean ± sample-sd, excluding undefined (NaN) values with a warning.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MaskVolume, Volume

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

GRID_POINTS = 1001
_CURVE_HEADER = ["threshold", "recall", "precision", "fpr", "tpr"]


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxel-level true/false positive/negative counts."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts cannot be negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: MaskVolume, truth: MaskVolume) -> ConfusionCounts:
    """Exact confusion counts between two masks on the same grid."""
    for name, m in (("prediction", pred), ("truth", truth)):
        if not isinstance(m, MaskVolume):
            raise TypeError(f"{name} must be a MaskVolume, got {type(m).__name__}")
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"grid mismatch: prediction {pred.values.shape} vs "
                         f"truth {truth.values.shape}; resample explicitly first")
    if not all(math.isclose(a, b, rel_tol=1e-9) for a, b in zip(pred.spacing, truth.spacing)):
        raise ValueError(f"grid mismatch: prediction spacing {pred.spacing} vs "
                         f"truth spacing {truth.spacing}")
    p = pred.values.astype(bool)
    t = truth.values.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def dsc(c: ConfusionCounts) -> float:
    """Dice similarity 2TP/(FP+2TP+FN); two empty masks count as identical."""
    denominator = c.fp + 2 * c.tp + c.fn
    if denominator == 0:
        log.warning("DSC of two empty masks defined as 1.0")
        return 1.0
    return 2 * c.tp / denominator


def _rate(numerator: int, denominator: int, name: str) -> float:
    if denominator == 0:
        log.warning("%s undefined (zero denominator); excluded from aggregates", name)
        return math.nan
    return numerator / denominator


def sensitivity(c: ConfusionCounts) -> float:
    """TP/(TP+FN), a.k.a. recall."""
    return _rate(c.tp, c.tp + c.fn, "sensitivity")


def specificity(c: ConfusionCounts) -> float:
    """TN/(TN+FP)."""
    return _rate(c.tn, c.tn + c.fp, "specificity")


def precision(c: ConfusionCounts) -> float:
    """TP/(TP+FP), a.k.a. positive predictive value."""
    return _rate(c.tp, c.tp + c.fp, "precision")


@dataclass(frozen=True)
class CurvePoint:
    """One threshold's operating point."""

    threshold: float
    recall: float
    precision: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class Curve:
    """A threshold sweep as parallel arrays, thresholds ascending.

    ``auc`` is set by :func:`roc_curve`, ``average_precision`` by
    :func:`pr_curve`; both carry the same sweep geometry.
    """

    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float = None
    average_precision: float = None

    def __len__(self) -> int:
        return len(self.thresholds)

    @property
    def points(self) -> list:
        return [CurvePoint(*map(float, row)) for row in
                zip(self.thresholds, self.recall, self.precision, self.fpr, self.tpr)]


def _pooled_scores(pairs) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise ValueError("curve computation needs at least one (map, truth) pair")
    scores, truths = [], []
    for prob, truth in pairs:
        if not isinstance(prob, Volume):
            raise TypeError(f"probability map must be a Volume, got {type(prob).__name__}")
        if not isinstance(truth, MaskVolume):
            raise TypeError(f"truth must be a MaskVolume, got {type(truth).__name__}")
        if prob.values.shape != truth.values.shape:
            raise ValueError(f"grid mismatch: map {prob.values.shape} vs "
                             f"truth {truth.values.shape}")
        v = prob.values
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("probability map values must be finite and within [0, 1]")
        scores.append(np.asarray(v, dtype=np.float64).ravel())
        truths.append(truth.values.ravel().astype(bool))
    return np.concatenate(scores), np.concatenate(truths)


def _sweep(scores: np.ndarray, truth: np.ndarray) -> Curve:
    """Rates at every distinct score plus the 0/1 sentinels (strict >)."""
    n_pos = int(np.count_nonzero(truth))
    n_neg = truth.size - n_pos
    thresholds = np.unique(np.concatenate([scores, [0.0, 1.0]]))
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    pos_leq_cum = np.cumsum(truth[order])
    idx = np.searchsorted(sorted_scores, thresholds, side="right")
    pos_leq = np.where(idx > 0, pos_leq_cum[np.maximum(idx - 1, 0)], 0)
    tp = n_pos - pos_leq
    fp = (scores.size - idx) - tp
    predicted = tp + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr = tp / n_pos if n_pos else np.zeros_like(tp, dtype=float)
        fpr = fp / n_neg if n_neg else np.zeros_like(fp, dtype=float)
    prec = np.ones(len(thresholds))
    nonzero = predicted > 0
    prec[nonzero] = tp[nonzero] / predicted[nonzero]
    return Curve(thresholds=thresholds, recall=tpr.astype(float), precision=prec,
                 fpr=fpr.astype(float), tpr=tpr.astype(float))


def roc_curve(pairs) -> Curve:
    """Pooled ROC over all subjects' voxels, with trapezoidal AUC."""
    scores, truth = _pooled_scores(pairs)
    n_pos = int(np.count_nonzero(truth))
    if n_pos == 0 or n_pos == truth.size:
        raise ValueError("ROC needs both classes present in the pooled ground truth")
    sweep = _sweep(scores, truth)
    # Reversing the sweep (thresholds descending) orders points by
    # non-decreasing fpr AND tpr, so the trapezoid walks the staircase with
    # diagonal tie segments -- exactly the rank-sum 0.5-per-tie convention.
    # The appended (1, 1) terminus is the t -> 0- limit (predict everything):
    # unreachable by a legal threshold only when scores of exactly 0 exist,
    # and a zero-area duplicate otherwise.
    auc = float(_trapezoid(np.append(sweep.tpr[::-1], 1.0),
                           np.append(sweep.fpr[::-1], 1.0)))
    return Curve(thresholds=sweep.thresholds, recall=sweep.recall,
                 precision=sweep.precision, fpr=sweep.fpr, tpr=sweep.tpr, auc=auc)


def pr_curve(pairs) -> Curve:
    """Pooled precision-recall curve with step-sum average precision.

    AP walks the sweep from the highest threshold down (recall
    non-decreasing), adding each point's precision weighted by its recall
    increment.
    """
    scores, truth = _pooled_scores(pairs)
    if not np.any(truth):
        raise ValueError("PR curve needs at least one positive voxel")
    sweep = _sweep(scores, truth)
    # The terminal predict-everything point (recall 1, precision = class
    # prevalence) completes the walk when scores of exactly 0 keep a legal
    # threshold from reaching full recall; otherwise its increment is zero.
    prevalence = float(np.count_nonzero(truth)) / truth.size
    recall_desc = np.append(sweep.recall[::-1], 1.0)
    precision_desc = np.append(sweep.precision[::-1], prevalence)
    increments = np.diff(np.concatenate([[0.0], recall_desc]))
    ap = float(np.sum(increments * precision_desc))
    return Curve(thresholds=sweep.thresholds, recall=sweep.recall,
                 precision=sweep.precision, fpr=sweep.fpr, tpr=sweep.tpr,
                 average_precision=ap)


def optimal_threshold(curve) -> float:
    """Threshold of the PR point nearest (recall, precision) = (1, 1).

    Ties prefer higher recall, then the lower threshold; the choice is
    invariant under duplication of curve points.
    """
    if isinstance(curve, Curve):
        if len(curve) == 0:
            raise ValueError("cannot pick a threshold from an empty curve")
        d2 = (1.0 - curve.recall) ** 2 + (1.0 - curve.precision) ** 2
        best = np.lexsort((curve.thresholds, -curve.recall, d2))[0]
        return float(curve.thresholds[best])
    points = list(curve)
    if not points:
        raise ValueError("cannot pick a threshold from an empty curve")
    best = min(points, key=lambda p: ((1.0 - p.recall) ** 2 + (1.0 - p.precision) ** 2,
                                      -p.recall, p.threshold))
    return float(best.threshold)


def curve_on_grid(curve: Curve, n: int = GRID_POINTS) -> Curve:
    """The sweep's step function sampled on n evenly spaced thresholds.

    Rates between two sweep thresholds equal those at the lower one (no
    score falls in between), so the lookup is exact, not an interpolation.
    """
    if n < 2:
        raise ValueError(f"grid needs at least 2 points, got {n}")
    grid = np.arange(n, dtype=np.float64) / (n - 1)
    idx = np.maximum(np.searchsorted(curve.thresholds, grid, side="right") - 1, 0)
    return Curve(thresholds=grid, recall=curve.recall[idx],
                 precision=curve.precision[idx], fpr=curve.fpr[idx],
                 tpr=curve.tpr[idx])


def grid_average(curves, n: int = GRID_POINTS) -> Curve:
    """Mean of several sweeps on the common grid (the fold-mean curve)."""
    if not curves:
        raise ValueError("need at least one curve to average")
    on_grid = [curve_on_grid(c, n) for c in curves]
    return Curve(
        thresholds=on_grid[0].thresholds,
        recall=np.mean([c.recall for c in on_grid], axis=0),
        precision=np.mean([c.precision for c in on_grid], axis=0),
        fpr=np.mean([c.fpr for c in on_grid], axis=0),
        tpr=np.mean([c.tpr for c in on_grid], axis=0),
    )


@dataclass(frozen=True)
class SubjectResult:
    """One validation subject's metrics at its fold's threshold."""

    subject_id: str
    fold: int
    threshold: float
    counts: ConfusionCounts
    dsc: float
    precision: float
    recall: float
    specificity: float
    both_empty: bool


def subject_row(subject_id: str, fold: int, threshold: float,
                pred: MaskVolume, truth: MaskVolume) -> SubjectResult:
    """Score one prediction against its ground truth."""
    c = confusion(pred, truth)
    return SubjectResult(
        subject_id=subject_id, fold=fold, threshold=float(threshold), counts=c,
        dsc=dsc(c), precision=precision(c), recall=sensitivity(c),
        specificity=specificity(c), both_empty=(c.tp + c.fp + c.fn) == 0)


@dataclass(frozen=True)
class Aggregate:
    """Mean +/- sample sd of one metric over subjects (or folds)."""

    mean: float
    sd: float
    n_used: int
    n_excluded: int

    def __format__(self, spec: str) -> str:
        return format(format_pm(self.mean, self.sd), spec)


def format_pm(mean: float, sd: float) -> str:
    return f"{mean:.3f}±{sd:.3f}"


def _aggregate(values, name: str) -> Aggregate:
    """Order-invariant mean/sd: values are sorted before accumulating."""
    arr = np.asarray(list(values), dtype=np.float64)
    finite = np.sort(arr[np.isfinite(arr)])
    excluded = arr.size - finite.size
    if excluded:
        log.warning("%d of %d %s values undefined; excluded from the aggregate",
                    excluded, arr.size, name)
    if finite.size == 0:
        return Aggregate(mean=math.nan, sd=math.nan, n_used=0, n_excluded=excluded)
    sd = float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0
    return Aggregate(mean=float(np.mean(finite)), sd=sd,
                     n_used=int(finite.size), n_excluded=excluded)


@dataclass(frozen=True)
class EvalReport:
    """Per-subject rows plus the aggregates the report formats quote."""

    rows: tuple
    dsc: Aggregate
    precision: Aggregate
    recall: Aggregate
    specificity: Aggregate
    auc: Aggregate
    average_precision: Aggregate
    thresholds: tuple


def build_report(rows, fold_aucs=(), fold_aps=(), thresholds=()) -> EvalReport:
    """Aggregate subject rows (and per-fold curve summaries) into a report."""
    rows = tuple(rows)
    if not rows:
        raise ValueError("a report needs at least one subject row")
    fold_aucs = tuple(fold_aucs)
    fold_aps = tuple(fold_aps)
    empty = Aggregate(mean=math.nan, sd=math.nan, n_used=0, n_excluded=0)
    return EvalReport(
        rows=rows,
        dsc=_aggregate((r.dsc for r in rows), "DSC"),
        precision=_aggregate((r.precision for r in rows), "precision"),
        recall=_aggregate((r.recall for r in rows), "recall"),
        specificity=_aggregate((r.specificity for r in rows), "specificity"),
        auc=_aggregate(fold_aucs, "AUC") if fold_aucs else empty,
        average_precision=_aggregate(fold_aps, "AP") if fold_aps else empty,
        thresholds=tuple(float(t) for t in thresholds),
    )


def results_table_text(reports: dict) -> str:
    """The cross-validation results table: one row per architecture label.

    Columns mirror the reference layout: DSC, Precision, Recall as
    mean ± sd, preceded by the architecture label (with F and L).  Curve
    summaries follow the table as one detail line per architecture.
    """
    if not reports:
        raise ValueError("no reports to format")
    width = max(len("Architecture"), *(len(label) for label in reports)) + 2
    lines = [f"{'Architecture':<{width}}{'DSC':<14}{'Precision':<14}{'Recall':<14}".rstrip()]
    for label, report in reports.items():
        lines.append(f"{label:<{width}}{report.dsc:<14}{report.precision:<14}"
                     f"{report.recall:<14}".rstrip())
    lines.append("")
    for label, report in reports.items():
        thresholds = ", ".join(f"{t:.4f}" for t in report.thresholds)
        lines.append(f"{label}: AUC {report.auc}, AP {report.average_precision}, "
                     f"fold thresholds [{thresholds}]")
    return "\n".join(lines) + "\n"


def write_report_csv(path, report: EvalReport) -> None:
    """Per-subject rows plus one aggregate row, as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "fold", "threshold", "tp", "fp", "fn", "tn",
                         "dsc", "precision", "recall", "specificity"])
        for r in report.rows:
            writer.writerow([r.subject_id, r.fold, repr(r.threshold),
                             r.counts.tp, r.counts.fp, r.counts.fn, r.counts.tn,
                             repr(r.dsc), repr(r.precision), repr(r.recall),
                             repr(r.specificity)])
        writer.writerow(["aggregate", "", "", "", "", "", "",
                         f"{report.dsc}", f"{report.precision}",
                         f"{report.recall}", f"{report.specificity}"])


def write_curve_csv(path, curve: Curve) -> None:
    """One row per threshold: threshold, recall, precision, fpr, tpr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CURVE_HEADER)
        for t, r, p, f, tp in zip(curve.thresholds, curve.recall, curve.precision,
                                  curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(r)), repr(float(p)),
                             repr(float(f)), repr(float(tp))])


def read_curve_csv(path) -> Curve:
    """Parse a curve CSV back into arrays (inverse of write_curve_csv)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _CURVE_HEADER:
        raise ValueError(f"{path}: not a curve CSV (expected header "
                         f"{','.join(_CURVE_HEADER)})")
    if len(rows) < 2:
        raise ValueError(f"{path}: curve has no data rows")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]],
                        dtype=np.float64)
    except ValueError as err:
        raise ValueError(f"{path}: malformed curve row: {err}") from None
    if data.ndim != 2 or data.shape[1] != 5:
        raise ValueError(f"{path}: curve rows must have 5 columns")
    if np.any(np.diff(data[:, 0]) < 0):
        raise ValueError(f"{path}: thresholds must be non-decreasing")
    return Curve(thresholds=data[:, 0], recall=data[:, 1], precision=data[:, 2],
                 fpr=data[:, 3], tpr=data[:, 4])


def render_curves_svg(path, fold_curves, mean_curve: Curve, kind: str,
                      label: str = "") -> None:
    """Line plot of per-fold curves plus their grid mean, written as SVG."""
    if kind not in ("roc", "prc"):
        raise ValueError(f"kind must be 'roc' or 'prc', got {kind!r}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "femseg"
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    try:
        for i, curve in enumerate(fold_curves):
            x, y = ((curve.fpr, curve.tpr) if kind == "roc"
                    else (curve.recall, curve.precision))
            ax.plot(x, y, linewidth=0.8, alpha=0.6, label=f"fold {i}")
        mx, my = ((mean_curve.fpr, mean_curve.tpr) if kind == "roc"
                  else (mean_curve.recall, mean_curve.precision))
        ax.plot(mx, my, linewidth=2.0, color="black", label="mean")
        if kind == "roc":
            ax.plot([0, 1], [0, 1], linestyle=":", linewidth=0.8, color="gray")
            ax.set_xlabel("False positive rate")
            ax.set_ylabel("True positive rate")
        else:
            ax.set_xlabel("Recall")
            ax.set_ylabel("Precision")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        if label:
            ax.set_title(label)
        ax.legend(loc="lower right" if kind == "roc" else "lower left", fontsize=8)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
