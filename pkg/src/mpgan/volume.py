"""Volumetric data types, intensity normalization, label encoding and file I/O.

The native on-disk format ("MPGV") is a 16-byte header followed by the raw
voxels::

    bytes 0-3    magic b"MPGV"
    bytes 4-15   depth, height, width as little-endian uint32
    bytes 16-    depth*height*width little-endian float32, depth-major (C order)

NIfTI files (``.nii`` / ``.nii.gz``) are read and written through ``nibabel``
when it is installed.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConstantVolume,
    CorruptHeader,
    IoFailure,
    NonFiniteInput,
    ShapeMismatch,
)

MAGIC = b"MPGV"
HEADER = struct.Struct("<4s3I")
MIN_SIDE = 4

STAGE_NAMES = ("NC", "SMC", "EMCI", "LMCI", "AD")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    """A single-channel 3D intensity grid (depth, height, width)."""

    data: np.ndarray
    intensity_range: tuple[float, float] = (-1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"volume must be rank 3, got shape {data.shape}")
        if min(data.shape) < MIN_SIDE:
            raise ShapeMismatch(f"every side must be >= {MIN_SIDE}, got {data.shape}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def in_range(self, atol: float = 0.0) -> bool:
        lo, hi = self.intensity_range
        return bool(self.data.min() >= lo - atol and self.data.max() <= hi + atol)


@dataclass(frozen=True)
class ClassLabel:
    index: int
    K: int = 5

    def __post_init__(self):
        if self.K < 1 or not 0 <= self.index < self.K:
            raise ValueError(f"label index {self.index} outside [0, {self.K})")

    @property
    def name(self) -> str:
        if self.K == len(STAGE_NAMES):
            return STAGE_NAMES[self.index]
        return f"stage{self.index}"


@dataclass(frozen=True)
class ClassProbabilities:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be a simplex vector")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return len(self.probs)

    def argmax(self) -> ClassLabel:
        return ClassLabel(int(np.argmax(self.probs)), self.K)


@dataclass(frozen=True)
class ClassDiscriminativeMap:
    """Signed additive map; ``source + map`` gives the synthesized volume."""

    data: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"map must be rank 3, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteInput("class-discriminative map contains NaN/Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def normalization_affine(raw: np.ndarray) -> tuple[float, float]:
    """Return ``(scale, offset)`` such that ``scale * raw + offset`` spans [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteInput("input contains NaN or Inf")
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        raise ConstantVolume(f"constant volume (all voxels = {lo})")
    scale = 2.0 / (hi - lo)
    return scale, -1.0 - lo * scale


def normalize_volume(raw) -> Volume:
    """Per-volume min-max rescale to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    scale, offset = normalization_affine(raw)
    out = raw * scale + offset
    # pin the endpoints so rounding never leaves them off by an ulp
    out[raw == raw.min()] = -1.0
    out[raw == raw.max()] = 1.0
    return Volume(np.clip(out, -1.0, 1.0))


def one_hot(label: ClassLabel) -> np.ndarray:
    v = np.zeros(label.K, dtype=np.float32)
    v[label.index] = 1.0
    return v


def broadcast_label(vec: Sequence[float], shape: tuple[int, int, int]) -> np.ndarray:
    """Tile a length-K vector into K constant channels of spatial ``shape``."""
    vec = np.asarray(vec, dtype=np.float32)
    return np.broadcast_to(vec[:, None, None, None], (len(vec), *shape)).copy()


def save_volume(volume: Volume | np.ndarray, path) -> None:
    data = volume.data if isinstance(volume, (Volume, ClassDiscriminativeMap)) else volume
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise ShapeMismatch(f"expected rank-3 data, got shape {data.shape}")
    path = Path(path)
    if _is_nifti(path):
        _save_nifti(data, path)
        return
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, *data.shape))
            fh.write(data.tobytes(order="C"))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_array(path) -> np.ndarray:
    """Read an MPGV (or NIfTI) file into a float32 array without validation."""
    path = Path(path)
    if _is_nifti(path):
        return _load_nifti(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < HEADER.size:
        raise CorruptHeader(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, d, h, w = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    payload = blob[HEADER.size:]
    expected = d * h * w * 4
    if len(payload) != expected:
        raise ShapeMismatch(
            f"{path}: header declares {d}x{h}x{w} ({d * h * w} voxels) "
            f"but payload holds {len(payload) / 4:g}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)


def load_volume(path, intensity_range=(-1.0, 1.0)) -> Volume:
    return Volume(read_array(path), intensity_range=intensity_range)


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _nibabel():
    try:
        import nibabel
    except ImportError as exc:  # optional dependency
        raise IoFailure("NIfTI support needs the optional 'nibabel' package") from exc
    return nibabel


def _load_nifti(path: Path) -> np.ndarray:
    nib = _nibabel()
    if not os.path.exists(path):
        raise IoFailure(f"no such file: {path}")
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    data = np.squeeze(data)
    if data.ndim != 3:
        raise ShapeMismatch(f"{path}: expected a 3D image, got shape {data.shape}")
    return data


def _save_nifti(data: np.ndarray, path: Path) -> None:
    nib = _nibabel()
    try:
        nib.save(nib.Nifti1Image(data.astype(np.float32), np.eye(4)), str(path))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
