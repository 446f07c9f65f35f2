"""Class-discriminative map extraction, slice overlays and atlas region tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import load_archive
from .errors import IoFailure, ShapeMismatch, SliceOutOfRange, SpecMismatch
from .nets import Generator, GeneratorSpec, generator_forward
from .volume import ClassDiscriminativeMap, ClassLabel, Volume

VIEWS = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass(frozen=True)
class OverlaySpec:
    view: str = "axial"
    slice_index: int | None = None
    colormap: str = "coolwarm"
    alpha: float = 0.8

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {sorted(VIEWS)}, got {self.view!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def index_for(self, shape) -> int:
        n = shape[VIEWS[self.view]]
        i = n // 2 if self.slice_index is None else self.slice_index
        if not 0 <= i < n:
            raise SliceOutOfRange(f"{self.view} slice {i} outside [0, {n})")
        return i


@dataclass(frozen=True)
class AtlasVolume:
    """Integer region labels (0 = background) and a region-name table."""

    labels: np.ndarray
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("atlas labels must be a rank-3 integer grid")
        if lab.min() < 0:
            raise ValueError("atlas labels must be non-negative")
        object.__setattr__(self, "labels", lab)

    def name(self, index: int) -> str:
        return self.names.get(index, f"region{index}")


def load_generator(path) -> Generator:
    arrays, meta = load_archive(path)
    try:
        spec = GeneratorSpec(**meta["model"]["generator"])
    except (KeyError, TypeError) as exc:
        raise SpecMismatch(f"{path} carries no generator spec") from exc
    G = Generator(spec)
    sd = {k[2:]: torch.from_numpy(a.copy()) for k, a in arrays.items() if k.startswith("G/")}
    try:
        G.load_state_dict(sd)
    except RuntimeError as exc:
        raise SpecMismatch(f"{path}: generator weights do not match the stored GeneratorSpec: {exc}") from exc
    return G.eval()


def extract_map(model, x: Volume, y_target: ClassLabel) -> ClassDiscriminativeMap:
    """Map that moves ``x`` toward ``y_target``; ``model`` is a Generator or checkpoint path."""
    G = model if isinstance(model, Generator) else load_generator(model)
    if y_target.K != G.spec.K:
        raise SpecMismatch(f"target label has K={y_target.K}, generator expects K={G.spec.K}")
    if any(s % G.divisor for s in x.shape):
        raise SpecMismatch(f"volume shape {x.shape} is not divisible by {G.divisor}")
    return generator_forward(G, x, y_target)


def _slice(a: np.ndarray, view: str, i: int) -> np.ndarray:
    return np.take(a, i, axis=VIEWS[view])


def overlay_rgb(x: Volume, delta, spec: OverlaySpec) -> tuple[np.ndarray, float]:
    """RGB uint8 slice: grayscale anatomy blended with the signed map.

    Colour weight at a pixel is ``alpha * |map| / max|map|`` (per-map scaling),
    so zero-valued pixels stay pure grayscale. Returns the image and the scale.
    """
    from matplotlib import colormaps

    d = np.asarray(getattr(delta, "data", delta), dtype=np.float64)
    if d.shape != x.shape:
        raise ShapeMismatch(f"map {d.shape} does not match volume {x.shape}")
    i = spec.index_for(x.shape)
    lo, hi = x.intensity_range
    gray = np.clip((_slice(x.data, spec.view, i) - lo) / (hi - lo), 0.0, 1.0)
    gray_rgb = np.repeat(gray[..., None], 3, axis=2)
    scale = float(np.abs(d).max())
    if scale == 0.0 or spec.alpha == 0.0:
        return np.round(gray_rgb * 255).astype(np.uint8), scale
    m = _slice(d, spec.view, i) / scale
    color = colormaps[spec.colormap]((m + 1.0) / 2.0)[..., :3]
    w = (spec.alpha * np.abs(m))[..., None]
    out = (1.0 - w) * gray_rgb + w * color
    return np.round(np.clip(out, 0.0, 1.0) * 255).astype(np.uint8), scale


def render_overlay(x: Volume, delta, spec: OverlaySpec, out_path) -> Path:
    """Write the overlay as a PNG; the map scale and view go into text chunks."""
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    rgb, scale = overlay_rgb(x, delta, spec)
    info = PngInfo()
    info.add_text("mpgan:view", spec.view)
    info.add_text("mpgan:slice", str(spec.index_for(x.shape)))
    info.add_text("mpgan:map_abs_max", repr(scale))
    out_path = Path(out_path)
    try:
        Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG", pnginfo=info)
    except OSError as exc:
        raise IoFailure(f"cannot write {out_path}: {exc}") from exc
    return out_path


@dataclass(frozen=True)
class RegionRow:
    index: int
    name: str
    mean_abs: float
    frac_above: float
    n_voxels: int


def region_report(delta, atlas: AtlasVolume, top_n: int | None = None,
                  threshold: float | None = None) -> list[RegionRow]:
    """Per-region mean |map| and fraction of voxels above ``threshold``.

    ``threshold`` defaults to half the map's max |value|. Rows are sorted by
    mean |map| descending, ties by region index.
    """
    d = np.abs(np.asarray(getattr(delta, "data", delta), dtype=np.float64))
    if d.shape != atlas.labels.shape:
        raise ShapeMismatch(f"map {d.shape} does not match atlas {atlas.labels.shape}")
    if threshold is None:
        threshold = 0.5 * d.max()
    labels = atlas.labels.ravel()
    flat = d.ravel()
    n_regions = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_regions)
    sums = np.bincount(labels, weights=flat, minlength=n_regions)
    above = np.bincount(labels, weights=(flat > threshold).astype(np.float64), minlength=n_regions)
    rows = [
        RegionRow(r, atlas.name(r), float(sums[r] / counts[r]), float(above[r] / counts[r]), int(counts[r]))
        for r in range(1, n_regions) if counts[r] > 0
    ]
    # rounding keeps equal-valued regions tied despite summation-order noise
    rows.sort(key=lambda row: (-round(row.mean_abs, 12), row.index))
    return rows if top_n is None else rows[:top_n]


REGION_COLUMNS = ["roi_index", "roi_name", "mean_abs_delta", "frac_above_threshold", "n_voxels"]


def write_region_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGION_COLUMNS)
        for r in rows:
            w.writerow([r.index, r.name, repr(r.mean_abs), repr(r.frac_above), r.n_voxels])
