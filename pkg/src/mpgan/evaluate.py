"""Model-level evaluation: map recovery against ground truth and the augmentation experiment."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .metrics import DEFAULT_PEAK, MetricReport, classification_metrics, ncc, psnr
from .nets import Classifier, ClassifierSpec, Generator, synthesize
from .losses import cls_loss_from_logits
from .volume import ClassLabel, Volume


@dataclass(frozen=True)
class MapScore:
    subject_id: int
    source: int
    target: int
    ncc: float
    psnr: float
    ncc_shuffled: float


def _derangement_by_subject(subjects: Sequence[int]) -> np.ndarray:
    """For each position, the index of an entry from a different subject.

    Unique subjects are rotated by one place so the pairing is deterministic.
    """
    subjects = np.asarray(subjects)
    uniq = np.unique(subjects)
    if len(uniq) < 2:
        raise ValueError("a shuffled baseline needs at least two subjects")
    nxt = {int(s): int(uniq[(k + 1) % len(uniq)]) for k, s in enumerate(uniq)}
    first = {int(s): int(np.flatnonzero(subjects == s)[0]) for s in uniq}
    return np.array([first[nxt[int(s)]] for s in subjects])


def evaluate_maps(G: Generator, samples: Sequence, peak: float = DEFAULT_PEAK) -> list[MapScore]:
    """NCC/PSNR of predicted maps against ground truth for every (sample, other class) pair.

    ``ncc_shuffled`` compares the same prediction with the truth map of a
    different subject (same source and target stage), a chance-level baseline.
    It is NaN for a (source, target) group drawn from a single subject.
    """
    from .vismap import extract_map

    K = G.spec.K
    items = []
    for s in samples:
        for t in range(K):
            if t != s.label.index:
                items.append((s, t))
    preds = [extract_map(G, s.volume, ClassLabel(t, K)).data for s, t in items]
    truths = [s.gt_normalized(t) for s, t in items]
    out = []
    # baseline partner: same (source, target) pair from another subject
    groups: dict[tuple[int, int], list[int]] = {}
    for k, (s, t) in enumerate(items):
        groups.setdefault((s.label.index, t), []).append(k)
    partner = np.full(len(items), -1)
    for ks in groups.values():
        subjects = [items[k][0].subject_id for k in ks]
        if len(set(subjects)) > 1:
            partner[ks] = np.asarray(ks)[_derangement_by_subject(subjects)]
    for k, ((s, t), p, g) in enumerate(zip(items, preds, truths)):
        shuffled = _safe_ncc(p, truths[partner[k]]) if partner[k] >= 0 else math.nan
        out.append(MapScore(
            subject_id=s.subject_id, source=s.label.index, target=t,
            ncc=_safe_ncc(p, g), psnr=psnr(p, g, peak), ncc_shuffled=shuffled,
        ))
    return out


def _safe_ncc(a, b) -> float:
    if np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return ncc(a, b)


def map_report(scores: Sequence[MapScore]) -> MetricReport:
    return MetricReport(ncc=[s.ncc for s in scores], psnr=[s.psnr for s in scores])


def write_map_scores(scores: Sequence[MapScore], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "source", "target", "ncc", "psnr", "ncc_shuffled"])
        for s in scores:
            w.writerow([s.subject_id, s.source, s.target, repr(s.ncc), repr(s.psnr), repr(s.ncc_shuffled)])


def write_summary(rows: dict[str, dict], path) -> None:
    """Box-plot statistics, one row per metric."""
    cols = ["metric", "n", "median", "q1", "q3", "min", "max"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for name, st in rows.items():
            w.writerow([name, *(repr(st[c]) if isinstance(st[c], float) else st[c] for c in cols[1:])])


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class ClassifierTraining:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class AugmentationResult:
    baseline: MetricReport
    augmented: MetricReport
    n_synthetic: int
    effect: dict = field(default_factory=dict)

    def rows(self):
        for name, rep in (("baseline", self.baseline), ("augmented", self.augmented)):
            c = rep.classification
            yield [name, repr(c.auc), repr(c.acc), repr(c.sensitivity), repr(c.specificity)]


def _stack(vols) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(v.data, dtype=np.float32) for v in vols]))[:, None]


def train_classifier(x: torch.Tensor, y: np.ndarray, spec: ClassifierSpec, cfg: ClassifierTraining) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        C = Classifier(spec)
    opt = torch.optim.Adam(C.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    C.train()
    yt = torch.as_tensor(y)
    for _ in range(cfg.steps):
        idx = rng.choice(len(y), size=min(cfg.batch_size, len(y)), replace=False)
        loss = cls_loss_from_logits(C(x[idx]), yt[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return C.eval()


@torch.no_grad()
def positive_scores(C: Classifier, x: torch.Tensor, positive: int = 1) -> np.ndarray:
    C.eval()
    return torch.softmax(C(x).double(), dim=1)[:, positive].numpy()


def synthesize_class_samples(G: Generator, sources: Sequence, pair: tuple[int, int], count: int,
                             seed: int = 0) -> tuple[list[Volume], list[int]]:
    """``count`` volumes per class of ``pair``, each synthesized from a real volume of the other class."""
    rng = np.random.default_rng(seed)
    vols, labels = [], []
    for k, cls in enumerate(pair):
        other = pair[1 - k]
        pool = [s for s in sources if s.label.index == other]
        if count and not pool:
            raise ValueError(f"no source volumes of class {other}")
        for j in rng.integers(len(pool), size=count) if count else []:
            vols.append(synthesize(G, pool[j].volume, ClassLabel(cls, G.spec.K)))
            labels.append(k)
    return vols, labels


def augmentation_experiment(train_set: Sequence, synth_count: int, classifier_spec: ClassifierSpec,
                            test_set: Sequence, G: Generator, pair: tuple[int, int] = (0, 1),
                            training: ClassifierTraining = ClassifierTraining()) -> AugmentationResult:
    """Train the classifier on real data and on real + synthesized data; score both on ``test_set``.

    Only samples whose class is in ``pair`` are used; ``pair[1]`` is the positive class.
    Both runs use identical seeds and schedules.
    """
    spec = ClassifierSpec(**{**classifier_spec.__dict__, "K": 2})
    real = [s for s in train_set if s.label.index in pair]
    test = [s for s in test_set if s.label.index in pair]
    x_real = _stack([s.volume for s in real])
    y_real = np.array([pair.index(s.label.index) for s in real])
    x_test = _stack([s.volume for s in test])
    y_test = np.array([pair.index(s.label.index) for s in test])

    synth, y_syn = synthesize_class_samples(G, real, pair, synth_count, seed=training.seed)
    reports = []
    for use_synth in (False, True):
        if use_synth and synth:
            x = torch.cat([x_real, _stack(synth)])
            y = np.concatenate([y_real, np.array(y_syn)])
        else:
            x, y = x_real, y_real
        C = train_classifier(x, y, spec, training)
        reports.append(MetricReport(classification=classification_metrics(positive_scores(C, x_test), y_test)))
    base, aug = reports
    effect = {k: getattr(aug.classification, k) - getattr(base.classification, k)
              for k in ("auc", "acc", "sensitivity", "specificity")}
    return AugmentationResult(base, aug, len(synth), effect)


def write_augmentation_csv(result: AugmentationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "auc", "acc", "sensitivity", "specificity"])
        w.writerows(result.rows())
        w.writerow(["effect", *(repr(result.effect[k]) for k in ("auc", "acc", "sensitivity", "specificity"))])
