"""The whole workflow through the command-line interface, at toy scale.

phantom -> cv -> report -> curves, exactly the commands you would run on
a real cohort, shrunk to a few seconds: 4 subjects, a 2-feature network,
2 folds, 8 epochs.  At this scale the scores in the report are noise --
the point is the mechanics: manifests, run configs, fold artifacts,
reports, and re-plottable curve files.  Swap in real cohort sizes and
F=8..32, L=2..4 and the same commands run the real experiment.
"""

import json
import subprocess
import sys
from pathlib import Path

OUT = Path(__file__).parent / "output" / "experiment"
OUT.mkdir(parents=True, exist_ok=True)


def femseg(*args):
    cmd = [sys.executable, "-m", "femseg", *args]
    print(f"$ femseg {' '.join(args)}")
    result = subprocess.run(cmd, capture_output=True, text=True)
    for line in (result.stdout + result.stderr).strip().splitlines():
        print(f"  {line}")
    if result.returncode != 0:
        raise SystemExit(f"command failed with exit code {result.returncode}")
    print()


# 1. Generate a cohort.
cohort = OUT / "cohort"
femseg("phantom", "--out", str(cohort), "--count", "4",
       "--extents", "32,32,8", "--seed", "9")

# 2. Describe the experiment in a run config.
config = {
    "manifest": str(cohort / "manifest.json"),
    "out": str(OUT / "cv3d"),
    "model": {"rank": 3, "features": 2, "levels": 1},
    "train": {"max_epochs": 8, "learning_rate": 5e-3, "seed": 9},
    "folds": 2,
    "precision": "f32",
}
config_path = OUT / "run3d.json"
config_path.write_text(json.dumps(config, indent=2))
print(f"run config:\n{config_path.read_text()}\n")

# 3. Cross-validate: trains one model per fold, scores held-out subjects
#    at each fold's PRC-optimal threshold, writes the report + curves.
femseg("cv", "--config", str(config_path))

# 4. The artifacts.
cv_dir = OUT / "cv3d"
print("artifacts:")
for path in sorted(cv_dir.rglob("*")):
    if path.is_file():
        print(f"  {path.relative_to(OUT)}  ({path.stat().st_size} bytes)")

print("\nreport.txt:")
print((cv_dir / "report.txt").read_text())

# 5. Re-render curves from the stored CSVs (no model needed).
femseg("curves", "--csv", str(cv_dir / "curves" / "fold0.csv"),
       "--csv", str(cv_dir / "curves" / "fold1.csv"),
       "--kind", "prc", "--out", str(OUT / "replot"))
print("done: a fold-resolution PRC figure now lives in replot/prc.svg")
