"""
Train and evaluate
==================

Drives the command-line pipeline on the desk configuration: generate the
phantom, train, score the maps against ground truth, render one map, and run
the paired augmentation experiment.

The full desk run is 5000 steps (about 50 minutes on one CPU). Pass
``--steps`` for a quick look::

    python scripts/train_and_evaluate.py --out desk --steps 300
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from mpgan.cli import dispatch

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="desk")
parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"))
parser.add_argument("--steps", type=int)
args = parser.parse_args()
root = Path(args.out)
data, run = root / "data", root / "run"


def check(argv):
    code = dispatch(argv)
    if code != 0:
        raise SystemExit(f"{argv[0]} exited with {code}")


###########################################################################
# Phantom: 100 subjects, one scan per stage, manifest plus truth maps and a
# lesion-site atlas.

check(["phantom", "--config", args.config, "--out", str(data)])

###########################################################################
# Training writes losses.csv, periodic checkpoints and the validation SSIM
# history under the run directory.

train = ["train", "--config", args.config, "--data", str(data / "manifest.csv"), "--out", str(run)]
if args.steps:
    train += ["--steps", str(args.steps)]
check(train)

with open(run / "losses.csv", newline="") as fh:
    rows = list(csv.DictReader(fh))
for r in rows[:: max(1, len(rows) // 5)] + rows[-1:]:
    print(f"step {r['step']:>5}  adv {float(r['adv']):+.3f}  cls_fake {float(r['cls_fake']):.3f}  "
          f"l1 {float(r['l1_penalty']):.4f}  cyc_org {float(r['cyc_org']):.4f}")

###########################################################################
# Map scores on the held-out test subjects. The shuffled column pairs each
# prediction with another subject's truth, a baseline for location.

last = str(run / "checkpoints" / "last.npz")
check(["evaluate", "--run-dir", str(run), "--checkpoint", last])
with open(run / "reports" / "map_scores_test.csv", newline="") as fh:
    scores = list(csv.DictReader(fh))
ncc = np.array([float(r["ncc"]) for r in scores])
shuffled = np.array([float(r["ncc_shuffled"]) for r in scores])
print(f"median NCC {np.median(ncc):.3f}, shuffled baseline {np.nanmedian(shuffled):.3f}")

###########################################################################
# One map rendered over its input, with the lesion-site region table.

vol = data / "volumes" / "sub0000_stage0_scan0.mpgv"
check(["visualize", "--checkpoint", last, "--input", str(vol), "--target-class", "1",
       "--atlas", str(data / "lesion_atlas.mpgv"), "--atlas-names", str(data / "lesion_atlas.csv"),
       "--out-dir", str(root / "maps")])
print("overlays:", ", ".join(p.name for p in sorted((root / "maps").glob("**/*.png"))))

###########################################################################
# Paired augmentation: the same classifier recipe with and without 100
# synthesized volumes per class.

check(["augment-eval", "--run-dir", str(run), "--checkpoint", last])
with open(run / "reports" / "augmentation.csv", newline="") as fh:
    for r in csv.DictReader(fh):
        print(f"{r['arm']:>10}  acc {float(r['acc']):+.3f}  auc {float(r['auc']):+.3f}")
