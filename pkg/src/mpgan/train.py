"""Multidirectional training: random target classes, alternating D -> C -> G updates."""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .archive import load_archive, save_archive
from .errors import DegenerateK, EmptyClass, NonFiniteLoss, SpecMismatch
from .metrics import ssim
from .nets import (
    Classifier,
    ClassifierSpec,
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_networks,
    onehot_batch,
    synthesize,
)
from .volume import ClassLabel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_G: float = 1e-3
    lr_C: float = 1e-3
    lr_D: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    max_steps: int = 2000
    val_every: int = 100
    patience: int = 10
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    clamp_synth: bool = False
    instance_noise: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.lr_G, self.lr_C, self.lr_D) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.instance_noise < 0:
            raise ValueError("instance_noise must be non-negative")
        if self.lr_D > self.lr_G:
            raise ValueError("the discriminator learns no faster than the generator (lr_D <= lr_G)")


@dataclass(frozen=True)
class ModelSpec:
    generator: GeneratorSpec
    classifier: ClassifierSpec
    discriminator: DiscriminatorSpec = DiscriminatorSpec()

    @property
    def K(self) -> int:
        return self.generator.K

    def as_dict(self) -> dict:
        return {k: asdict(v) for k, v in
                (("generator", self.generator), ("classifier", self.classifier),
                 ("discriminator", self.discriminator))}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(GeneratorSpec(**d["generator"]), ClassifierSpec(**d["classifier"]),
                   DiscriminatorSpec(**d["discriminator"]))


def desk_model(K: int = 2) -> ModelSpec:
    return ModelSpec(GeneratorSpec(K=K, base_channels=8), ClassifierSpec(K=K, depth=14, growth_rate=6),
                     DiscriminatorSpec(base_channels=8))


@dataclass
class TrainState:
    config: TrainConfig
    model: ModelSpec
    G: Generator
    C: Classifier
    D: Discriminator
    opt_G: torch.optim.Adam
    opt_C: torch.optim.Adam
    opt_D: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0
    best_val_ssim: float = -math.inf

    @property
    def K(self) -> int:
        return self.model.K


def _adam(module, lr, betas):
    return torch.optim.Adam(module.parameters(), lr=lr, betas=tuple(betas))


def init_state(config: TrainConfig, model: ModelSpec) -> TrainState:
    G, C, D = build_networks(model.generator, model.classifier, model.discriminator, seed=config.seed)
    return TrainState(
        config=config, model=model, G=G, C=C, D=D,
        opt_G=_adam(G, config.lr_G, config.adam_betas),
        opt_C=_adam(C, config.lr_C, config.adam_betas),
        opt_D=_adam(D, config.lr_D, config.adam_betas),
        rng=np.random.default_rng(config.seed),
    )


# ---------------------------------------------------------------- data

class VolumeSet:
    """Samples stacked into one tensor, with lookups by class and by (subject, class).

    Accepts any objects exposing ``volume``, ``label`` and ``subject_id``.
    """

    def __init__(self, samples: Sequence, K: int):
        if not samples:
            raise ValueError("empty sample set")
        self.samples = list(samples)
        self.K = K
        self.x = torch.from_numpy(np.stack([s.volume.data for s in self.samples]))[:, None]
        self.y = np.array([s.label.index for s in self.samples])
        self.subjects = np.array([s.subject_id for s in self.samples])
        self.by_class = {k: np.flatnonzero(self.y == k) for k in range(K)}
        self.by_subject_class: dict[tuple[int, int], np.ndarray] = {}
        for i, (sid, k) in enumerate(zip(self.subjects, self.y)):
            self.by_subject_class.setdefault((int(sid), int(k)), [])
            self.by_subject_class[(int(sid), int(k))].append(i)

    def __len__(self):
        return len(self.samples)

    def reference(self, i: int, target: int, rng: np.random.Generator) -> int:
        """Index of a real volume of class ``target``: same subject if possible, else any."""
        same = self.by_subject_class.get((int(self.subjects[i]), int(target)))
        pool = same if same else self.by_class[target]
        if len(pool) == 0:
            raise EmptyClass(f"no volume of class {target}")
        return int(pool[rng.integers(len(pool))]) if len(pool) > 1 else int(pool[0])


def sample_target(y: int | ClassLabel, rng: np.random.Generator, K: int | None = None) -> int:
    """Uniform draw over the K - 1 classes other than ``y``."""
    if isinstance(y, ClassLabel):
        y, K = y.index, y.K
    if K is None or K < 2:
        raise DegenerateK(f"need at least two classes, got K={K}")
    t = int(rng.integers(K - 1))
    return t + 1 if t >= y else t


@contextlib.contextmanager
def frozen(*modules: torch.nn.Module):
    """Treat ``modules`` as fixed functions: no parameter gradients, running norm statistics.

    Each sample's gradient then depends on that sample alone, and the norm
    buffers are left untouched. Training flags are restored on exit.
    """
    flags = [[p.requires_grad for p in m.parameters()] for m in modules]
    modes = [m.training for m in modules]
    for m in modules:
        m.requires_grad_(False)
        m.eval()
    try:
        yield
    finally:
        for m, fl, mode in zip(modules, flags, modes):
            m.train(mode)
            for p, f in zip(m.parameters(), fl):
                p.requires_grad_(f)


def _check(terms: dict, step: int):
    vals = {k: float(v.detach()) for k, v in terms.items()}
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        dump = ", ".join(f"{k}={v!r}" for k, v in vals.items())
        raise NonFiniteLoss(f"step {step}: non-finite {sorted(bad)}; terms: {dump}")


def _d_logits(D: Discriminator, real: torch.Tensor, fake: torch.Tensor):
    out = D(torch.cat([real, fake]))
    return out[: len(real)], out[len(real):]


@dataclass
class Batch:
    """Tensors for one step: sources, their labels, sampled targets and target references."""

    x: torch.Tensor
    y: np.ndarray
    y_tar: np.ndarray
    x_tar_real: torch.Tensor


def make_batch(state: TrainState, data: VolumeSet, idx: Sequence[int]) -> Batch:
    """Draw a target class per sample and pick a real reference volume of that class."""
    if len(idx) == 0:
        raise ValueError("empty batch")
    idx = np.asarray(idx)
    y = data.y[idx]
    y_tar = np.array([sample_target(int(v), state.rng, state.K) for v in y])
    ref = np.array([data.reference(int(i), int(t), state.rng) for i, t in zip(idx, y_tar)])
    return Batch(data.x[idx], y, y_tar, data.x[ref])


def _synth(state: TrainState, b: Batch):
    delta = state.G(b.x, onehot_batch(b.y_tar, state.K, b.x.dtype))
    x_fake = b.x + delta
    if state.config.clamp_synth:
        x_fake = x_fake.clamp(-1.0, 1.0)
    return delta, x_fake


def _noisy(state: TrainState, x: torch.Tensor) -> torch.Tensor:
    """``x`` plus fresh Gaussian instance noise drawn from the run RNG (identity when disabled)."""
    sigma = state.config.instance_noise
    if sigma == 0:
        return x
    noise = state.rng.normal(0.0, sigma, tuple(x.shape)).astype(np.float32)
    return x + torch.from_numpy(noise).to(x.dtype)


def d_update(state: TrainState, b: Batch, x_fake: torch.Tensor) -> torch.Tensor:
    """Minimise -adv over D; real and fake share one forward pass so batch norm sees both."""
    adv = L.adv_loss_from_logits(*_d_logits(state.D, _noisy(state, b.x), _noisy(state, x_fake.detach())))
    _check({"adv": adv}, state.step)
    state.opt_D.zero_grad(set_to_none=True)
    (-adv).backward()
    state.opt_D.step()
    return adv.detach()


def c_update(state: TrainState, b: Batch) -> torch.Tensor:
    """Classification loss on real volumes only."""
    cls_real = L.cls_loss_from_logits(state.C(_noisy(state, b.x)), torch.as_tensor(b.y))
    _check({"cls_real": cls_real}, state.step)
    state.opt_C.zero_grad(set_to_none=True)
    cls_real.backward()
    state.opt_C.step()
    return cls_real.detach()


def g_terms(state: TrainState, b: Batch, delta=None, x_fake=None) -> dict:
    """Generator loss terms; the generator is applied twice (forward map, then reconstruction).

    Run inside ``frozen(state.C, state.D)``. C and D see the volumes through the
    same instance noise as in their own updates.
    """
    if delta is None:
        delta, x_fake = _synth(state, b)
    K, cfg = state.K, state.config
    adv = L.adv_loss_from_logits(*_d_logits(state.D, _noisy(state, b.x), _noisy(state, x_fake)))
    cls_fake = L.cls_loss_from_logits(state.C(_noisy(state, x_fake)), torch.as_tensor(b.y_tar))
    recon = state.G(x_fake, onehot_batch(b.y, K, b.x.dtype)) + x_fake
    l1 = L.l1_penalty(delta)
    cyc_tar = L.cyc_tar_loss(b.x_tar_real, x_fake)
    cyc_org = L.cyc_org_loss(b.x, recon)
    total_G = L.generator_objective(adv, cls_fake, l1, cyc_org, cyc_tar, cfg.weights)
    return dict(adv=adv, cls_fake=cls_fake, cyc_tar=cyc_tar, cyc_org=cyc_org, l1_penalty=l1, total_G=total_G)


def g_update(state: TrainState, b: Batch, delta=None, x_fake=None) -> dict:
    with frozen(state.C, state.D):
        terms = g_terms(state, b, delta, x_fake)
        _check(terms, state.step)
        state.opt_G.zero_grad(set_to_none=True)
        terms["total_G"].backward()
    state.opt_G.step()
    return {k: v.detach() for k, v in terms.items()}


def train_step(state: TrainState, data: VolumeSet, idx: Sequence[int]) -> L.LossReport:
    """One D update, one C update, one G update on the samples ``idx``; mutates ``state``.

    The map is computed once; D sees it detached, G is updated through it.
    The reported adversarial and generator terms are those of the G update.
    """
    for m in (state.G, state.C, state.D):
        m.train()
    b = make_batch(state, data, idx)
    delta, x_fake = _synth(state, b)
    d_update(state, b, x_fake)
    cls_real = c_update(state, b)
    t = g_update(state, b, delta, x_fake)
    state.step += 1
    return L.total_losses(t["adv"].item(), cls_real.item(), t["cls_fake"].item(), t["cyc_tar"].item(),
                          t["cyc_org"].item(), t["l1_penalty"].item(), state.config.weights)


def validate(state: TrainState, data: VolumeSet, targets: Sequence[int] | None = None,
             seed: int = 0) -> float:
    """Mean SSIM between synthesized volumes and real volumes of the target class."""
    K = state.K
    missing = [k for k in range(K) if len(data.by_class.get(k, [])) == 0]
    if missing:
        raise EmptyClass(f"validation set has no samples of class(es) {missing}")
    rng = np.random.default_rng(seed)
    scores = []
    for i, s in enumerate(data.samples):
        y = s.label.index
        t = (y + 1 + i % (K - 1)) % K if targets is None else int(targets[i])
        fake = synthesize(state.G, s.volume, ClassLabel(t, K))
        real = data.samples[data.reference(i, t, rng)].volume
        scores.append(ssim(fake, real))
    return float(np.mean(scores))


# ---------------------------------------------------------------- checkpoints

def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> dict:
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{pid}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return {"param_groups": sd["param_groups"]}


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state: dict = {}
    for name, a in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, pid, key = name.rsplit("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(a.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = L.LossWeights(**d["weights"])
    d["adam_betas"] = tuple(d["adam_betas"])
    return TrainConfig(**d)


def checkpoint(state: TrainState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for tag, m in (("G", state.G), ("C", state.C), ("D", state.D)):
        for k, v in m.state_dict().items():
            arrays[f"{tag}/{k}"] = v.detach().cpu().numpy()
    opt_meta = {tag: _flatten_optimizer(f"opt_{tag}", o, arrays)
                for tag, o in (("G", state.opt_G), ("C", state.opt_C), ("D", state.opt_D))}
    manifest = {
        "kind": "train_state",
        "step": state.step,
        "best_val_ssim": state.best_val_ssim if math.isfinite(state.best_val_ssim) else None,
        "rng": state.rng.bit_generator.state,
        "config": _config_dict(state.config),
        "model": state.model.as_dict(),
        "optimizers": opt_meta,
    }
    save_archive(path, arrays, manifest)


def resume(path) -> TrainState:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "train_state":
        raise SpecMismatch(f"{path} is not a training checkpoint")
    config = config_from_dict(meta["config"])
    model = ModelSpec.from_dict(meta["model"])
    state = init_state(config, model)
    for tag, m in (("G", state.G), ("C", state.C), ("D", state.D)):
        sd = {k[len(tag) + 1:]: torch.from_numpy(a.copy()) for k, a in arrays.items()
              if k.startswith(tag + "/")}
        try:
            m.load_state_dict(sd)
        except RuntimeError as exc:
            raise SpecMismatch(f"{path}: weights for {tag} do not match its spec: {exc}") from exc
    for tag, o in (("G", state.opt_G), ("C", state.opt_C), ("D", state.opt_D)):
        _restore_optimizer(f"opt_{tag}", o, arrays, meta["optimizers"][tag])
    state.rng.bit_generator.state = meta["rng"]
    state.step = int(meta["step"])
    best = meta["best_val_ssim"]
    state.best_val_ssim = -math.inf if best is None else float(best)
    return state


# ---------------------------------------------------------------- loop

def draw_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Indices for one step, drawn without replacement; keeps no state besides ``rng``."""
    return rng.choice(n, size=min(batch_size, n), replace=False)


def fit(state: TrainState, train: VolumeSet, val: VolumeSet | None, run_dir=None,
        checkpoint_every: int = 0) -> TrainState:
    """Train until ``max_steps`` or until validation SSIM stops improving for ``patience`` checks."""
    cfg = state.config
    run_dir = Path(run_dir) if run_dir is not None else None
    loss_log = ssim_path = ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        loss_log = L.LossLog(run_dir / "losses.csv", append=state.step > 0)
        ssim_path = run_dir / "ssim.csv"
        if state.step == 0:
            _write_rows(ssim_path, [["step", "val_ssim"]], "w")
            _write_rows(ckpt_dir / "best_history.csv", [["step", "val_ssim"]], "w")
    stale = 0
    while state.step < cfg.max_steps:
        report = train_step(state, train, draw_batch(state.rng, len(train), cfg.batch_size))
        if loss_log is not None:
            loss_log.write(state.step, report)
        if val is not None and cfg.val_every > 0 and state.step % cfg.val_every == 0:
            score = validate(state, val)
            log.info("step %d  total_G %.4f  val SSIM %.4f", state.step, report.total_G, score)
            if ssim_path is not None:
                _write_rows(ssim_path, [[state.step, repr(score)]])
            if score > state.best_val_ssim:
                state.best_val_ssim = score
                stale = 0
                if ckpt_dir is not None:
                    checkpoint(state, ckpt_dir / "best.npz")
                    _write_rows(ckpt_dir / "best_history.csv", [[state.step, repr(score)]])
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("validation SSIM plateaued; stopping at step %d", state.step)
                    break
        if ckpt_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            checkpoint(state, ckpt_dir / "last.npz")
    if ckpt_dir is not None:
        checkpoint(state, ckpt_dir / "last.npz")
    return state


def _write_rows(path, rows, mode="a"):
    with open(path, mode, newline="") as fh:
        csv.writer(fh).writerows(rows)

