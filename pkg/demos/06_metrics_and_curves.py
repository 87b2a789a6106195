"""The evaluation protocol: counts, curves, optimal thresholds, reports.

Everything reduces to confusion counts.  Curves sweep every distinct
score as a threshold; the operating point is the PRC point closest to
the ideal (1, 1); reports aggregate per-subject scores as mean +/- sd.
"""

from pathlib import Path

import numpy as np

from femseg import metrics
from femseg.data import MaskVolume, Volume

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)


def mask(flat):
    a = np.asarray(flat, dtype=np.uint8).reshape(1, 1, -1)
    return MaskVolume(a, (1.0, 1.0, 1.0))


def scored(flat):
    a = np.asarray(flat, dtype=np.float64).reshape(1, 1, -1)
    return Volume(a, (1.0, 1.0, 1.0), kind="map")


# --- counts and the scores built on them -------------------------------------
pred = mask([1, 1, 1, 0, 0, 0, 1, 0])
true = mask([1, 1, 0, 1, 0, 0, 0, 0])
c = metrics.confusion(pred, true)
print(f"counts: TP={c.tp} FP={c.fp} FN={c.fn} TN={c.tn}")
print(f"DSC        = 2*{c.tp}/(2*{c.tp}+{c.fp}+{c.fn}) "
      f"= {metrics.dsc(c):.4f}")
print(f"precision  = {metrics.precision(c):.4f}")
print(f"recall     = {metrics.sensitivity(c):.4f}")
print(f"specificity= {metrics.specificity(c):.4f}")

# DSC is exactly the harmonic mean of precision and recall (F1).
p, r = metrics.precision(c), metrics.sensitivity(c)
print(f"2PR/(P+R)  = {2 * p * r / (p + r):.4f}  (same number)")

# --- curves on the textbook four-voxel case ----------------------------------
scores = scored([0.1, 0.4, 0.35, 0.8])
labels = mask([0, 0, 1, 1])
roc = metrics.roc_curve([(scores, labels)])
prc = metrics.pr_curve([(scores, labels)])
print(f"\nfour scored voxels: AUC={roc.auc:.4f}, AP={prc.average_precision:.4f}"
      f"  (the classic 5/6 example)")
for pt in prc.points:
    print(f"  t={pt.threshold:.2f}  recall={pt.recall:.2f} "
          f"precision={pt.precision:.2f}")
best = metrics.optimal_threshold(prc)
print(f"operating point closest to (recall, precision) = (1, 1): t={best:.2f}")

# --- the cross-validation results table --------------------------------------
rng = np.random.default_rng(5)
rows = []
for fold in range(4):
    for s in range(5):
        tp = int(rng.integers(800, 1000))
        fp = int(rng.integers(10, 80))
        fn = int(rng.integers(10, 80))
        counts = metrics.ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=30000)
        rows.append(metrics.SubjectResult(
            subject_id=f"s{fold}{s}", fold=fold, threshold=0.5, counts=counts,
            dsc=metrics.dsc(counts), precision=metrics.precision(counts),
            recall=metrics.sensitivity(counts),
            specificity=metrics.specificity(counts), both_empty=False))
report = metrics.build_report(rows,
                              fold_aucs=[0.996, 0.997, 0.995, 0.998],
                              fold_aps=[0.97, 0.98, 0.96, 0.97],
                              thresholds=[0.48, 0.52, 0.50, 0.49])
print()
print(metrics.results_table_text({"3D CNN, F:32, L:4": report}))

# --- curve files and plots ----------------------------------------------------
grid = metrics.curve_on_grid(prc)
csv_path = OUT / "prc_demo.csv"
metrics.write_curve_csv(csv_path, grid)
svg_path = OUT / "prc_demo.svg"
metrics.render_curves_svg(svg_path, [grid], grid, kind="prc",
                          label="four-voxel example")
print(f"wrote {csv_path.name} ({csv_path.stat().st_size} bytes) and "
      f"{svg_path.name} ({svg_path.stat().st_size} bytes) under demos/output/")
