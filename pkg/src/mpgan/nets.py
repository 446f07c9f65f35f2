"""Conditional generator, DenseNet-BC classifier and 7-layer discriminator (3D).

All three networks take batches shaped ``(B, 1, D, H, W)``. The thin
``*_forward`` helpers wrap them for single :class:`~mpgan.volume.Volume`
inputs in evaluation mode.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteGradient, ShapeNotDivisible
from .volume import (
    ClassDiscriminativeMap,
    ClassLabel,
    ClassProbabilities,
    Volume,
)


@dataclass(frozen=True)
class GeneratorSpec:
    K: int = 5
    base_channels: int = 16
    n_res_blocks: int = 3
    downsample_steps: int = 2
    norm: bool = True
    conditional_norm: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.n_res_blocks < 1 or self.downsample_steps < 1:
            raise ValueError(f"invalid generator spec {self}")


@dataclass(frozen=True)
class ClassifierSpec:
    K: int = 5
    depth: int = 14
    growth_rate: int = 6
    n_dense_blocks: int = 3
    reduction: float = 0.5
    bottleneck: bool = True

    def __post_init__(self):
        if not 0 < self.reduction <= 1:
            raise ValueError(f"reduction must be in (0, 1], got {self.reduction}")
        if self.layers_per_block < 1:
            raise ValueError(f"depth {self.depth} too small for {self.n_dense_blocks} blocks")

    @property
    def layers_per_block(self) -> int:
        # one stem conv plus one transition per block boundary, plus the classifier
        n = (self.depth - (self.n_dense_blocks + 1)) // self.n_dense_blocks
        return n // 2 if self.bottleneck else n

    @property
    def n_conv_layers(self) -> int:
        per_layer = 2 if self.bottleneck else 1
        return 1 + self.n_dense_blocks * self.layers_per_block * per_layer + (self.n_dense_blocks - 1)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 8
    n_strided: int = 3
    n_conv_layers: int = 7

    def __post_init__(self):
        if not 1 <= self.n_strided < self.n_conv_layers:
            raise ValueError("need at least one strided and one 1x1x1 layer")

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return (4,) * self.n_strided + (1,) * (self.n_conv_layers - self.n_strided)


OUT_INIT_GAIN = 0.01


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled Gaussian kernels, zero biases, unit-scale/zero-shift norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose3d):
                fan_in = w.shape[0] * math.prod(w.shape[2:])
            else:
                fan_in = math.prod(w.shape[1:])
            nn.init.normal_(w, 0.0, math.sqrt(2.0 / fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm3d, nn.BatchNorm3d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class CondInstanceNorm3d(nn.Module):
    """Instance norm whose scale and shift are linear in the one-hot target label.

    A spatially constant label channel is removed by instance normalization,
    so the label has to re-enter after each normalization to survive.
    """

    def __init__(self, ch: int, K: int):
        super().__init__()
        self.norm = nn.InstanceNorm3d(ch, affine=False)
        self.scale = nn.Linear(K, ch)
        self.shift = nn.Linear(K, ch)

    def reset(self) -> None:
        for lin, b in ((self.scale, 1.0), (self.shift, 0.0)):
            nn.init.zeros_(lin.weight)
            nn.init.constant_(lin.bias, b)

    def forward(self, h: torch.Tensor, y_onehot: torch.Tensor) -> torch.Tensor:
        y = y_onehot.to(h.dtype)
        return self.norm(h) * self.scale(y)[:, :, None, None, None] + self.shift(y)[:, :, None, None, None]


def _norm(ch: int, on: bool, K: int | None = None) -> nn.Module:
    if not on:
        return nn.Identity()
    return nn.InstanceNorm3d(ch, affine=True) if K is None else CondInstanceNorm3d(ch, K)


def _run(layers, h: torch.Tensor, y_onehot) -> torch.Tensor:
    for m in layers:
        h = m(h, y_onehot) if isinstance(m, (CondInstanceNorm3d, ResBlock3d)) else m(h)
    return h


class ResBlock3d(nn.Module):
    def __init__(self, ch: int, norm: bool = True, K: int | None = None):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(ch, ch, 3, padding=1),
            _norm(ch, norm, K),
            nn.ReLU(),
            nn.Conv3d(ch, ch, 3, padding=1),
            _norm(ch, norm, K),
        )

    def forward(self, x, y_onehot=None):
        return x + _run(self.body, x, y_onehot)


class Generator(nn.Module):
    """Label-conditioned encoder / residual / decoder producing a map in [-1, 1]."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        K = spec.K if spec.conditional_norm else None
        layers: list[nn.Module] = []
        ch_in = 1 + spec.K
        for i in range(spec.downsample_steps):
            ch_out = c * 2**i
            layers += [nn.Conv3d(ch_in, ch_out, 3, stride=2, padding=1), _norm(ch_out, spec.norm, K), nn.ReLU()]
            ch_in = ch_out
        layers += [ResBlock3d(ch_in, spec.norm, K) for _ in range(spec.n_res_blocks)]
        for i in reversed(range(spec.downsample_steps)):
            ch_out = c * 2 ** max(i - 1, 0)
            layers += [
                nn.ConvTranspose3d(ch_in, ch_out, 3, stride=2, padding=1, output_padding=1),
                _norm(ch_out, spec.norm, K),
                nn.ReLU(),
            ]
            ch_in = ch_out
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv3d(ch_in, 1, 1)
        init_weights(self)
        # start near the zero map: a full-scale output layer saturates tanh and stalls learning
        with torch.no_grad():
            self.out.weight.mul_(OUT_INIT_GAIN)
        for m in self.modules():
            if isinstance(m, CondInstanceNorm3d):
                m.reset()

    @property
    def divisor(self) -> int:
        return 2**self.spec.downsample_steps

    def forward(self, x: torch.Tensor, y_onehot: torch.Tensor) -> torch.Tensor:
        if any(s % self.divisor for s in x.shape[2:]):
            raise ShapeNotDivisible(
                f"spatial shape {tuple(x.shape[2:])} must be divisible by {self.divisor}"
            )
        cond = y_onehot.to(x.dtype)[:, :, None, None, None].expand(-1, -1, *x.shape[2:])
        h = _run(self.body, torch.cat([x, cond], dim=1), y_onehot)
        return torch.tanh(self.out(h))


class _DenseLayer(nn.Module):
    def __init__(self, ch_in: int, growth: int, bottleneck: bool):
        super().__init__()
        parts: list[nn.Module] = []
        ch = ch_in
        if bottleneck:
            parts += [nn.BatchNorm3d(ch), nn.ReLU(), nn.Conv3d(ch, 4 * growth, 1, bias=False)]
            ch = 4 * growth
        parts += [nn.BatchNorm3d(ch), nn.ReLU(), nn.Conv3d(ch, growth, 3, padding=1, bias=False)]
        self.f = nn.Sequential(*parts)

    def forward(self, x):
        return torch.cat([x, self.f(x)], dim=1)


class Classifier(nn.Module):
    """3D DenseNet-BC emitting K logits."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        k = spec.growth_rate
        ch = 2 * k
        layers: list[nn.Module] = [nn.Conv3d(1, ch, 3, padding=1, bias=False)]
        for b in range(spec.n_dense_blocks):
            for _ in range(spec.layers_per_block):
                layers.append(_DenseLayer(ch, k, spec.bottleneck))
                ch += k
            if b < spec.n_dense_blocks - 1:
                ch_out = max(1, int(math.floor(ch * spec.reduction)))
                layers += [
                    nn.BatchNorm3d(ch),
                    nn.ReLU(),
                    nn.Conv3d(ch, ch_out, 1, bias=False),
                    nn.AvgPool3d(2),
                ]
                ch = ch_out
        layers += [nn.BatchNorm3d(ch), nn.ReLU(), nn.AdaptiveAvgPool3d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(ch, spec.K)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


class Discriminator(nn.Module):
    """Unconditional real/fake critic; returns one logit per volume."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        ch_in, ch = 1, spec.base_channels
        for i, k in enumerate(spec.kernel_sizes):
            last = i == spec.n_conv_layers - 1
            ch_out = 1 if last else ch
            if k == 4:
                layers.append(nn.Conv3d(ch_in, ch_out, 4, stride=2, padding=1))
            else:
                layers.append(nn.Conv3d(ch_in, ch_out, 1))
            if not last:
                layers += [nn.BatchNorm3d(ch_out), nn.ReLU()]
            ch_in = ch_out
            if k == 4 and i + 1 < spec.n_strided:
                ch *= 2
        self.net = nn.Sequential(*layers)
        init_weights(self)

    @property
    def output_conv(self) -> nn.Conv3d:
        return self.net[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(1, 2, 3, 4))


def count_convs(module: nn.Module) -> int:
    return sum(isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)) for m in module.modules())


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_networks(g_spec: GeneratorSpec, c_spec: ClassifierSpec, d_spec: DiscriminatorSpec, seed: int = 0):
    """Construct G, C, D with weights drawn from one seeded torch generator."""
    if g_spec.K != c_spec.K:
        raise ValueError("generator and classifier disagree on K")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(g_spec), Classifier(c_spec), Discriminator(d_spec)


def spec_dict(spec) -> dict:
    return asdict(spec)


# ---------------------------------------------------------------- single-volume API

def _as_batch(x: Volume, module: nn.Module) -> torch.Tensor:
    p = next(module.parameters())
    return torch.as_tensor(np.array(x.data), dtype=p.dtype)[None, None]


def onehot_batch(labels, K: int, dtype=torch.float32) -> torch.Tensor:
    idx = torch.as_tensor(labels, dtype=torch.long)
    return F.one_hot(idx, K).to(dtype)


@torch.no_grad()
def generator_forward(G: Generator, x: Volume, y_target: ClassLabel) -> ClassDiscriminativeMap:
    was_training = G.training
    G.eval()
    try:
        xb = _as_batch(x, G)
        delta = G(xb, onehot_batch([y_target.index], G.spec.K, xb.dtype))
    finally:
        G.train(was_training)
    return ClassDiscriminativeMap(delta[0, 0].cpu().numpy(), meta={"target": y_target.index})


def synthesize(G: Generator, x: Volume, y_target: ClassLabel, delta: ClassDiscriminativeMap | None = None) -> Volume:
    """x' = clamp(x + G(x, y')) into x's intensity range; clamp statistics go to ``meta``."""
    if delta is None:
        delta = generator_forward(G, x, y_target)
    raw = x.data.astype(np.float32) + delta.data
    lo, hi = x.intensity_range
    clamped = (raw < lo) | (raw > hi)
    meta = {
        "clamped": bool(clamped.any()),
        "clamp_fraction": float(clamped.mean()),
        "target": y_target.index,
    }
    return Volume(np.clip(raw, lo, hi), intensity_range=x.intensity_range, meta=meta)


@torch.no_grad()
def classifier_forward(C: Classifier, x: Volume) -> ClassProbabilities:
    was_training = C.training
    C.eval()
    try:
        logits = C(_as_batch(x, C))[0].double()
    finally:
        C.train(was_training)
    return ClassProbabilities(torch.softmax(logits, 0).numpy())


@torch.no_grad()
def discriminator_forward(D: Discriminator, x: Volume) -> float:
    was_training = D.training
    D.eval()
    try:
        logit = D(_as_batch(x, D))[0].double()
    finally:
        D.train(was_training)
    return float(torch.sigmoid(logit))


def grad(loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
         params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss_fn(params)`` with respect to each named array."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g.detach()
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name!r} is not finite")
        out[name] = g
    return out
