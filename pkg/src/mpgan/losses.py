"""Loss terms of the hybrid objective and the three per-network totals.

The functions accept numpy arrays, Python sequences or torch tensors and
return 0-d tensors, so the same code is used for training (with autograd)
and for checking against hand-computed numbers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import torch
import torch.nn.functional as F

from .errors import NonFiniteTerm, ShapeMismatch

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 0.1
    lambda_l1: float = 10.0
    lambda_cyc_org: float = 10.0
    lambda_cyc_tar: float = 1.0

    def __post_init__(self):
        if min(astuple(self)) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class LossReport:
    adv: float
    cls_real: float
    cls_fake: float
    cyc_tar: float
    cyc_org: float
    l1_penalty: float
    total_G: float
    total_C: float
    total_D: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(astuple(self))


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def adv_loss(d_real, d_fake) -> torch.Tensor:
    """mean log D(x) + mean log(1 - D(x')), scores clipped to [eps, 1 - eps]."""
    d_real = _t(d_real).clamp(EPS, 1 - EPS)
    d_fake = _t(d_fake).clamp(EPS, 1 - EPS)
    return torch.log(d_real).mean() + torch.log1p(-d_fake).mean()


def adv_loss_from_logits(real_logits, fake_logits) -> torch.Tensor:
    return adv_loss(torch.sigmoid(_t(real_logits)), torch.sigmoid(_t(fake_logits)))


def _labels(labels, n: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() != n:
        raise ShapeMismatch(f"{labels.numel()} labels for {n} probability rows")
    return labels


def cls_loss(probs, labels) -> torch.Tensor:
    """Mean negative log probability of the labelled class (probabilities floored at eps)."""
    probs = _t(probs)
    if probs.ndim == 1:
        probs = probs[None]
    idx = _labels(labels, probs.shape[0])
    p = probs.gather(1, idx[:, None]).squeeze(1)
    return -torch.log(p.clamp_min(EPS)).mean()


def cls_loss_from_logits(logits, labels) -> torch.Tensor:
    """Same value as ``cls_loss(softmax(logits), labels)``, computed stably."""
    logits = _t(logits)
    idx = _labels(labels, logits.shape[0])
    logp = F.log_softmax(logits, dim=1).gather(1, idx[:, None]).squeeze(1)
    return -logp.clamp_min(math.log(EPS)).mean()


cls_loss_real = cls_loss
cls_loss_fake = cls_loss


def _mean_abs_diff(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cyc_tar_loss(x_real_target, x_synth) -> torch.Tensor:
    """Forward cycle term: mean |x'_real - (G(x, y') + x)|."""
    return _mean_abs_diff(x_real_target, x_synth)


def cyc_org_loss(x, x_reconstructed) -> torch.Tensor:
    """Backward cycle term: mean |x - (G(x', y) + x')|."""
    return _mean_abs_diff(x, x_reconstructed)


def l1_penalty(delta) -> torch.Tensor:
    return _t(delta).abs().mean()


def generator_objective(adv, cls_fake, l1, cyc_org, cyc_tar, weights: LossWeights):
    return (adv
            + weights.lambda_cls * cls_fake
            + weights.lambda_l1 * l1
            + weights.lambda_cyc_org * cyc_org
            + weights.lambda_cyc_tar * cyc_tar)


def total_losses(adv, cls_real, cls_fake, cyc_tar, cyc_org, l1_penalty,
                 weights: LossWeights = LossWeights()) -> LossReport:
    terms = dict(adv=adv, cls_real=cls_real, cls_fake=cls_fake,
                 cyc_tar=cyc_tar, cyc_org=cyc_org, l1_penalty=l1_penalty)
    terms = {k: float(v) for k, v in terms.items()}
    for k, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteTerm(f"loss term {k} = {v}")
    total_G = generator_objective(terms["adv"], terms["cls_fake"], terms["l1_penalty"],
                                  terms["cyc_org"], terms["cyc_tar"], weights)
    return LossReport(**terms, total_G=total_G, total_C=terms["cls_real"], total_D=-terms["adv"])


class LossLog:
    """Append-only CSV of one LossReport per step."""

    def __init__(self, path, append: bool = False):
        self.path = path
        if not append:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", *LossReport.columns()])

    def write(self, step: int, report: LossReport) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, *(repr(v) for v in report.row())])
