"""Additive class-discriminative maps between ordered disease-stage domains.

A conditional generator emits a residual field ``delta = G(x, y')`` that moves
volume ``x`` toward class ``y'`` (``x' = x + delta``). An auxiliary classifier
and a discriminator shape the field during training; ``phantom`` builds
synthetic volumes whose true fields are known so the whole pipeline can be
checked end to end.
"""
from .errors import MPGANError
from .volume import ClassLabel, ClassDiscriminativeMap, ClassProbabilities, Volume, load_volume, normalize_volume, save_volume
from .nets import ClassifierSpec, DiscriminatorSpec, GeneratorSpec, generator_forward, synthesize
from .phantom import PhantomSpec, generate_dataset, split_by_subject
from .train import ModelSpec, TrainConfig, fit, init_state
from .metrics import ncc, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "MPGANError", "ClassLabel", "ClassDiscriminativeMap", "ClassProbabilities", "Volume",
    "load_volume", "normalize_volume", "save_volume", "ClassifierSpec", "DiscriminatorSpec",
    "GeneratorSpec", "generator_forward", "synthesize", "PhantomSpec", "generate_dataset",
    "split_by_subject", "ModelSpec", "TrainConfig", "fit", "init_state", "ncc", "psnr", "ssim",
]
