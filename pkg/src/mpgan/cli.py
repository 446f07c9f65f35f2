"""Command-line entry point: ``mpgan {phantom,train,visualize,evaluate,augment-eval}``.

Seed precedence: ``--seed`` flag, then ``MPGAN_SEED``, then ``seed`` in the
config file, then 0. Failures print ``error: <Category>: <message>`` on
stderr and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, format_config, parse_config
from .errors import IoFailure, MissingRequired, MPGANError

RUN_SUBDIRS = ("checkpoints", "maps", "overlays", "reports")

log = logging.getLogger("mpgan")


def _load_config(path, seed_flag, required=()) -> RunConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, required=required)
    env = os.environ.get("MPGAN_SEED")
    if seed_flag is not None:
        cfg.values["seed"] = int(seed_flag)
    elif env not in (None, ""):
        cfg.values["seed"] = int(env)
    return cfg


def _run_dir(out) -> Path:
    out = Path(out)
    for sub in RUN_SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _freeze(cfg: RunConfig, out: Path) -> None:
    (out / "config.frozen").write_text(format_config(cfg))


def _frozen_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.frozen"
    if not path.exists():
        raise IoFailure(f"{run_dir} has no config.frozen; is it a training run directory?")
    return parse_config(path.read_text())


# ---------------------------------------------------------------- subcommands

def cmd_phantom(args) -> None:
    from .phantom import generate_dataset, lesion_atlas, write_dataset
    from .volume import save_volume

    cfg = _load_config(args.config, args.seed)
    spec = cfg.phantom_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(spec)
    write_dataset(samples, out)
    atlas = lesion_atlas(spec)
    save_volume(atlas.labels.astype(np.float32), out / "lesion_atlas.mpgv")
    with open(out / "lesion_atlas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["roi_index", "roi_name"])
        w.writerows(sorted(atlas.names.items()))
    _freeze(cfg, out)
    print(f"wrote {len(samples)} volumes to {out}")


def _splits(cfg: RunConfig, records):
    from .phantom import split_by_subject

    return split_by_subject(records, tuple(cfg["data.split"]), seed=cfg.seed)


def _read_records(cfg: RunConfig, manifest=None):
    from .phantom import read_dataset

    manifest = manifest or cfg["data.manifest"]
    if not manifest:
        raise MissingRequired("no dataset: set data.manifest or pass --data")
    return read_dataset(manifest, K=cfg["model.K"])


def cmd_train(args) -> None:
    from .train import VolumeSet, fit, init_state, resume

    cfg = _load_config(args.config, args.seed)
    if args.data:
        cfg.values["data.manifest"] = str(Path(args.data).resolve())
    if args.steps is not None:
        cfg.values["train.max_steps"] = args.steps
    records = _read_records(cfg)
    K = records[0].label.K
    cfg.values["model.K"] = K
    train, val, test = _splits(cfg, records)
    out = _run_dir(args.out)
    _freeze(cfg, out)
    with open(out / "splits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "subject_id", "split"])
        for name, part in zip(("train", "val", "test"), (train, val, test)):
            w.writerows([r.path, r.subject_id, name] for r in part)
    torch.use_deterministic_algorithms(True)
    if args.resume:
        state = resume(args.resume)
    else:
        state = init_state(cfg.train_config(), cfg.model_spec(K))
    fit(state, VolumeSet(train, K), VolumeSet(val, K), run_dir=out,
        checkpoint_every=cfg["train.checkpoint_every"])
    print(f"trained {state.step} steps; best validation SSIM {state.best_val_ssim:.4f}")


def _checkpoint_for(run_dir: Path, explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    for name in ("best.npz", "last.npz"):
        p = run_dir / "checkpoints" / name
        if p.exists():
            return p
    raise IoFailure(f"no checkpoint found under {run_dir / 'checkpoints'}")


def _split_records(run_dir: Path, cfg: RunConfig, which: str):
    records = _read_records(cfg)
    with open(run_dir / "splits.csv", newline="") as fh:
        keep = {r["path"] for r in csv.DictReader(fh) if r["split"] == which}
    return [r for r in records if r.path in keep]


def cmd_visualize(args) -> None:
    from .vismap import AtlasVolume, OverlaySpec, extract_map, load_generator, region_report, render_overlay, write_region_csv
    from .volume import ClassLabel, load_volume, read_array, save_volume

    G = load_generator(args.checkpoint)
    x = load_volume(args.input)
    target = ClassLabel(args.target_class, G.spec.K)
    delta = extract_map(G, x, target)
    out = _run_dir(args.out_dir)
    stem = Path(args.input).name.split(".")[0] + f"_to{args.target_class}"
    save_volume(delta, out / "maps" / f"{stem}.mpgv")
    for view in args.views.split(","):
        spec = OverlaySpec(view=view.strip(), slice_index=args.slice, alpha=args.alpha)
        render_overlay(x, delta, spec, out / "overlays" / f"{stem}_{spec.view}.png")
    if args.atlas:
        labels = read_array(args.atlas).astype(np.int32)
        names = {}
        if args.atlas_names:
            with open(args.atlas_names, newline="") as fh:
                names = {int(r["roi_index"]): r["roi_name"] for r in csv.DictReader(fh)}
        rows = region_report(delta, AtlasVolume(labels, names), top_n=args.top_n)
        write_region_csv(rows, out / "reports" / f"{stem}_regions.csv")
    print(f"map written to {out / 'maps' / (stem + '.mpgv')}")


def cmd_evaluate(args) -> None:
    from .evaluate import evaluate_maps, map_report, write_map_scores, write_summary
    from .metrics import summarize
    from .vismap import load_generator

    run_dir = Path(args.run_dir)
    cfg = _frozen_config(run_dir)
    G = load_generator(_checkpoint_for(run_dir, args.checkpoint))
    samples = _split_records(run_dir, cfg, args.split)
    scores = evaluate_maps(G, samples, peak=cfg["metrics.peak"])
    reports = _run_dir(run_dir) / "reports"
    write_map_scores(scores, reports / f"map_scores_{args.split}.csv")
    rep = map_report(scores)
    summary = {**rep.summary(), "ncc_shuffled": summarize([s.ncc_shuffled for s in scores])}
    write_summary(summary, reports / f"map_summary_{args.split}.csv")
    print(f"median NCC {summary['ncc']['median']:.4f} (shuffled {summary['ncc_shuffled']['median']:.4f}), "
          f"median PSNR {summary['psnr']['median']:.2f} dB, peak {cfg['metrics.peak']}")


def cmd_augment(args) -> None:
    from .evaluate import ClassifierTraining, augmentation_experiment, write_augmentation_csv
    from .vismap import load_generator

    run_dir = Path(args.run_dir)
    cfg = _frozen_config(run_dir)
    G = load_generator(_checkpoint_for(run_dir, args.checkpoint))
    train = _split_records(run_dir, cfg, "train")
    test = _split_records(run_dir, cfg, "test")
    count = cfg["augment.synth_count"] if args.synth_count is None else args.synth_count
    result = augmentation_experiment(
        train, count, cfg.model_spec(G.spec.K).classifier, test, G,
        pair=tuple(cfg["augment.pair"]),
        training=ClassifierTraining(steps=cfg["augment.steps"], batch_size=cfg["train.batch_size"],
                                    lr=cfg["augment.lr"], seed=cfg.seed),
    )
    write_augmentation_csv(result, _run_dir(run_dir) / "reports" / "augmentation.csv")
    b, a = result.baseline.classification, result.augmented.classification
    print(f"accuracy baseline {b.acc:.4f} -> augmented {a.acc:.4f} (effect {result.effect['acc']:+.4f})")


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpgan", description="Train, extract and evaluate class-discriminative maps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train the generator, classifier and discriminator")
    s.add_argument("--config")
    s.add_argument("--data", help="manifest.csv (overrides data.manifest)")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--steps", type=int, help="override train.max_steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("visualize", help="extract and render a class-discriminative map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--target-class", type=int, required=True)
    s.add_argument("--views", default="sagittal,coronal,axial")
    s.add_argument("--slice", type=int)
    s.add_argument("--alpha", type=float, default=0.8)
    s.add_argument("--atlas", help="integer label volume for the region table")
    s.add_argument("--atlas-names", help="CSV with roi_index, roi_name")
    s.add_argument("--top-n", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("evaluate", help="NCC/PSNR of predicted maps against ground truth")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("augment-eval", help="paired classification with and without synthetic data")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--synth-count", type=int)
    s.set_defaults(func=cmd_augment)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except MPGANError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
