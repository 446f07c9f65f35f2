"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, sections are dotted key
prefixes. Lesion sites are given as numbered groups::

    phantom.lesion.0.center = 8, 12, 12
    phantom.lesion.0.radius = 3
    phantom.lesion.0.deltas = -0.3, -0.9

``format_config`` writes every resolved key back out, and parsing that text
gives back an equal configuration.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from typing import Any, Callable

from .errors import ConfigTypeError, MissingRequired, UnknownKey
from .losses import LossWeights
from .nets import ClassifierSpec, DiscriminatorSpec, GeneratorSpec
from .phantom import LesionSite, PhantomSpec
from .train import ModelSpec, TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("none", "") else int(s)


def _str(s: str) -> str:
    return s.strip()


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_PH, _TR, _W = PhantomSpec(), TrainConfig(), LossWeights()
_G, _C, _D = GeneratorSpec(K=2, base_channels=8), ClassifierSpec(K=2), DiscriminatorSpec()

# key -> (default, parser)
KEYS: dict[str, tuple[Any, Callable[[str], Any]]] = {
    "seed": (0, int),
    "data.manifest": ("", _str),
    "data.split": ((0.8, 0.1, 0.1), _floats),
    "phantom.shape": (_PH.shape, _ints),
    "phantom.K": (_PH.K, int),
    "phantom.noise_sigma": (_PH.noise_sigma, float),
    "phantom.subject_count": (_PH.subject_count, int),
    "phantom.scans_per_subject": (_PH.scans_per_subject, int),
    "phantom.sites_per_subject": (_PH.sites_per_subject, _opt_int),
    "phantom.center_jitter": (_PH.center_jitter, int),
    "model.K": (None, _opt_int),
    "generator.base_channels": (_G.base_channels, int),
    "generator.n_res_blocks": (_G.n_res_blocks, int),
    "generator.downsample_steps": (_G.downsample_steps, int),
    "classifier.depth": (_C.depth, int),
    "classifier.growth_rate": (_C.growth_rate, int),
    "classifier.n_dense_blocks": (_C.n_dense_blocks, int),
    "classifier.reduction": (_C.reduction, float),
    "discriminator.base_channels": (_D.base_channels, int),
    "train.batch_size": (_TR.batch_size, int),
    "train.lr_G": (_TR.lr_G, float),
    "train.lr_C": (_TR.lr_C, float),
    "train.lr_D": (_TR.lr_D, float),
    "train.adam_betas": (_TR.adam_betas, _floats),
    "train.max_steps": (_TR.max_steps, int),
    "train.val_every": (_TR.val_every, int),
    "train.patience": (_TR.patience, int),
    "train.clamp_synth": (_TR.clamp_synth, _bool),
    "train.instance_noise": (_TR.instance_noise, float),
    "train.checkpoint_every": (0, int),
    "weights.lambda_cls": (_W.lambda_cls, float),
    "weights.lambda_l1": (_W.lambda_l1, float),
    "weights.lambda_cyc_org": (_W.lambda_cyc_org, float),
    "weights.lambda_cyc_tar": (_W.lambda_cyc_tar, float),
    "metrics.peak": (2.0, float),
    "augment.synth_count": (100, int),
    "augment.steps": (300, int),
    "augment.lr": (1e-3, float),
    "augment.pair": ((0, 1), _ints),
}

LESION_KEY = re.compile(r"^phantom\.lesion\.(\d+)\.(center|radius|deltas)$")
_LESION_PARSERS = {"center": _ints, "radius": float, "deltas": _floats}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (d, _) in KEYS.items()})
    lesions: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def phantom_spec(self) -> PhantomSpec:
        v = self.values
        sites = None
        if self.lesions:
            sites = []
            for n in sorted(self.lesions):
                grp = self.lesions[n]
                missing = {"center", "radius", "deltas"} - grp.keys()
                if missing:
                    raise MissingRequired(f"phantom.lesion.{n} lacks {sorted(missing)}")
                sites.append(LesionSite(grp["center"], grp["radius"], grp["deltas"]))
        return PhantomSpec(
            shape=v["phantom.shape"], K=v["phantom.K"], lesion_sites=sites, anatomy_seed=self.seed,
            noise_sigma=v["phantom.noise_sigma"], subject_count=v["phantom.subject_count"],
            scans_per_subject=v["phantom.scans_per_subject"],
            sites_per_subject=v["phantom.sites_per_subject"], center_jitter=v["phantom.center_jitter"],
        )

    def weights(self) -> LossWeights:
        return LossWeights(**{f.name: self.values[f"weights.{f.name}"] for f in fields(LossWeights)})

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["train.batch_size"], lr_G=v["train.lr_G"], lr_C=v["train.lr_C"],
            lr_D=v["train.lr_D"], adam_betas=tuple(v["train.adam_betas"]), max_steps=v["train.max_steps"],
            val_every=v["train.val_every"], patience=v["train.patience"], seed=self.seed,
            weights=self.weights(), clamp_synth=v["train.clamp_synth"],
            instance_noise=v["train.instance_noise"],
        )

    def model_spec(self, K: int | None = None) -> ModelSpec:
        v = self.values
        K = v["model.K"] or K or v["phantom.K"]
        return ModelSpec(
            GeneratorSpec(K=K, base_channels=v["generator.base_channels"],
                          n_res_blocks=v["generator.n_res_blocks"],
                          downsample_steps=v["generator.downsample_steps"]),
            ClassifierSpec(K=K, depth=v["classifier.depth"], growth_rate=v["classifier.growth_rate"],
                           n_dense_blocks=v["classifier.n_dense_blocks"], reduction=v["classifier.reduction"]),
            DiscriminatorSpec(base_channels=v["discriminator.base_channels"]),
        )


def parse_config(text: str, required: tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigTypeError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (p.strip() for p in body.split("=", 1))
        m = LESION_KEY.match(key)
        try:
            if m:
                cfg.lesions.setdefault(int(m.group(1)), {})[m.group(2)] = _LESION_PARSERS[m.group(2)](raw)
            elif key in KEYS:
                cfg.values[key] = KEYS[key][1](raw)
            else:
                raise UnknownKey(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigTypeError(f"line {lineno}: bad value for {key!r}: {raw!r} ({exc})") from exc
        seen.add(key)
    for key in required:
        if key not in seen and not cfg.values.get(key):
            raise MissingRequired(f"required key {key!r} not set")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt(cfg.values[k])}" for k in KEYS]
    for n in sorted(cfg.lesions):
        for part in ("center", "radius", "deltas"):
            if part in cfg.lesions[n]:
                lines.append(f"phantom.lesion.{n}.{part} = {_fmt(cfg.lesions[n][part])}")
    return "\n".join(lines) + "\n"
