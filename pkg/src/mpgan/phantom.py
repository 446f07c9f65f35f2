"""Synthetic ordered-stage phantoms with exact ground-truth difference maps.

Each subject gets a smooth random anatomy (a sum of anisotropic Gaussian
blobs) plus spherical lesions whose intensity change grows with stage.
Because every volume is ``anatomy + stage_field(stage) + noise`` before
normalization, the true map between stages ``s`` and ``t`` of one subject is
simply ``stage_field(t) - stage_field(s)``.
"""
from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LesionOutOfBounds, TooFewSubjects
from .volume import ClassLabel, Volume, normalization_affine, normalize_volume, read_array, save_volume

N_BLOBS = 5


@dataclass(frozen=True)
class LesionSite:
    center: tuple[int, int, int]
    radius: float
    deltas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        mags = np.abs(self.deltas)
        if np.any(np.diff(mags) < 0):
            raise ValueError(f"lesion deltas must grow in magnitude with stage: {self.deltas}")


def default_sites(shape=(24, 24, 24), K: int = 2) -> tuple[LesionSite, ...]:
    """Six candidate sites on the axes through the centre, one per face direction."""
    c = np.array(shape) // 2
    off = max(3, min(shape) // 6)
    deltas = tuple(np.linspace(-0.3, -0.9, K)) if K > 1 else (-0.3,)
    sites = []
    for axis in range(3):
        for sign in (-1, 1):
            p = c.copy()
            p[axis] += sign * off
            sites.append(LesionSite(tuple(p), 3.0, deltas))
    return tuple(sites)


@dataclass(frozen=True)
class PhantomSpec:
    """Dataset recipe.

    ``lesion_sites`` lists candidate sites. Each subject receives
    ``sites_per_subject`` of them (all when ``None``), chosen at random, with
    every centre shifted by up to ``center_jitter`` voxels per axis.
    """

    shape: tuple[int, int, int] = (24, 24, 24)
    K: int = 2
    lesion_sites: tuple[LesionSite, ...] | None = None
    anatomy_seed: int = 0
    noise_sigma: float = 0.05
    subject_count: int = 100
    scans_per_subject: int = 1
    sites_per_subject: int | None = 1
    center_jitter: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.lesion_sites is None:
            object.__setattr__(self, "lesion_sites", default_sites(self.shape, self.K))
        object.__setattr__(self, "lesion_sites", tuple(self.lesion_sites))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.subject_count < 1 or self.scans_per_subject < 1:
            raise ValueError("subject_count and scans_per_subject must be positive")
        if self.K < 1:
            raise ValueError("K must be positive")
        for site in self.lesion_sites:
            if len(site.deltas) != self.K:
                raise ValueError(f"site {site.center} has {len(site.deltas)} deltas for K={self.K}")
            reach = site.radius + self.center_jitter
            for c, n in zip(site.center, self.shape):
                if c - reach < 0 or c + reach > n - 1:
                    raise LesionOutOfBounds(
                        f"lesion at {site.center} (radius {site.radius}, jitter "
                        f"{self.center_jitter}) leaves volume {self.shape}"
                    )
        n_sites = len(self.lesion_sites)
        if self.sites_per_subject is not None and not 0 <= self.sites_per_subject <= n_sites:
            raise ValueError(f"sites_per_subject must be in [0, {n_sites}]")


class GroundTruthTable(Mapping):
    """``table[t]`` is the raw-unit map that turns this sample's template into stage ``t``."""

    def __init__(self, stage_fields: Sequence[np.ndarray], source: int):
        self._fields = stage_fields
        self._source = source

    def __getitem__(self, t: int) -> np.ndarray:
        if not 0 <= t < len(self._fields):
            raise KeyError(t)
        return self._fields[t] - self._fields[self._source]

    def __iter__(self):
        return iter(range(len(self._fields)))

    def __len__(self):
        return len(self._fields)


@dataclass(frozen=True)
class PhantomSample:
    volume: Volume
    label: ClassLabel
    subject_id: int
    scan: int
    raw: np.ndarray = field(repr=False)
    scale: float = 1.0
    stage_fields: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def gt_map_to(self) -> GroundTruthTable:
        return GroundTruthTable(self.stage_fields, self.label.index)

    def gt_normalized(self, target: int) -> np.ndarray:
        """Ground-truth map in this volume's normalized intensity units."""
        return (self.gt_map_to[target] * self.scale).astype(np.float32)


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def base_anatomy(shape, rng: np.random.Generator) -> np.ndarray:
    zz, yy, xx = _grid(shape)
    n = np.array(shape, dtype=np.float64)
    out = np.zeros(shape)
    for _ in range(N_BLOBS):
        center = rng.uniform(0.3, 0.7, 3) * (n - 1)
        sigma = rng.uniform(0.12, 0.25, 3) * n
        amp = rng.uniform(0.6, 1.2)
        r2 = ((zz - center[0]) / sigma[0]) ** 2 + ((yy - center[1]) / sigma[1]) ** 2 + ((xx - center[2]) / sigma[2]) ** 2
        out += amp * np.exp(-0.5 * r2)
    return out


def sphere_mask(shape, center, radius) -> np.ndarray:
    zz, yy, xx = _grid(shape)
    return (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2 <= radius**2


def _subject_layout(spec: PhantomSpec, rng: np.random.Generator):
    n = len(spec.lesion_sites)
    k = n if spec.sites_per_subject is None else spec.sites_per_subject
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    layout = []
    for i in chosen:
        site = spec.lesion_sites[i]
        shift = rng.integers(-spec.center_jitter, spec.center_jitter + 1, 3)
        layout.append((int(i), tuple(np.add(site.center, shift)), site))
    return layout


def stage_fields(spec: PhantomSpec, layout) -> tuple[np.ndarray, ...]:
    fields = []
    for stage in range(spec.K):
        f = np.zeros(spec.shape)
        for _, center, site in layout:
            f[sphere_mask(spec.shape, center, site.radius)] += site.deltas[stage]
        fields.append(f)
    return tuple(fields)


def generate_subject(spec: PhantomSpec, subject_id: int) -> list[PhantomSample]:
    """All scans of one subject; depends only on (spec, subject_id)."""
    rng = np.random.default_rng([spec.anatomy_seed, subject_id])
    anatomy = base_anatomy(spec.shape, rng)
    layout = _subject_layout(spec, rng)
    fields = stage_fields(spec, layout)
    for f in fields:
        f.setflags(write=False)
    out = []
    for stage in range(spec.K):
        for scan in range(spec.scans_per_subject):
            raw = anatomy + fields[stage]
            if spec.noise_sigma > 0:
                raw = raw + rng.normal(0.0, spec.noise_sigma, spec.shape)
            scale, _ = normalization_affine(raw)
            out.append(PhantomSample(
                volume=normalize_volume(raw),
                label=ClassLabel(stage, spec.K),
                subject_id=subject_id,
                scan=scan,
                raw=raw,
                scale=scale,
                stage_fields=fields,
            ))
    return out


def generate_dataset(spec: PhantomSpec) -> list[PhantomSample]:
    samples = []
    for sid in range(spec.subject_count):
        samples.extend(generate_subject(spec, sid))
    return samples


def subject_sites(spec: PhantomSpec, subject_id: int) -> list[int]:
    """Indices of the candidate sites active for a subject."""
    rng = np.random.default_rng([spec.anatomy_seed, subject_id])
    base_anatomy(spec.shape, rng)
    return [i for i, _, _ in _subject_layout(spec, rng)]


def lesion_atlas(spec: PhantomSpec):
    """Synthetic atlas: candidate site ``i`` becomes region ``i + 1`` (first site wins overlaps)."""
    from .vismap import AtlasVolume

    labels = np.zeros(spec.shape, dtype=np.int32)
    names = {0: "background"}
    for i, site in enumerate(spec.lesion_sites):
        m = sphere_mask(spec.shape, site.center, site.radius + spec.center_jitter) & (labels == 0)
        labels[m] = i + 1
        names[i + 1] = f"site{i + 1}@{site.center[0]},{site.center[1]},{site.center[2]}"
    return AtlasVolume(labels, names)


def split_by_subject(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition samples into train/val/test so that no subject spans two splits."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    subjects = sorted({s.subject_id for s in samples})
    n = len(subjects)
    # largest-remainder allocation
    exact = np.array(fractions) * n
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if np.any(counts == 0):
        raise TooFewSubjects(f"{n} subject(s) cannot fill three non-empty splits {tuple(counts)}")
    order = np.random.default_rng(seed).permutation(subjects)
    groups = np.split(order, np.cumsum(counts)[:-1])
    membership = {int(sid): k for k, g in enumerate(groups) for sid in g}
    splits = ([], [], [])
    for s in samples:
        splits[membership[s.subject_id]].append(s)
    return splits


# ---------------------------------------------------------------- on-disk layout

MANIFEST = "manifest.csv"
GT_MANIFEST = "gt_manifest.csv"


def write_dataset(samples, out_dir) -> Path:
    """Write volumes, normalized-unit ground-truth maps and both manifests."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    with open(out / MANIFEST, "w", newline="") as fm, open(out / GT_MANIFEST, "w", newline="") as fg:
        wm, wg = csv.writer(fm), csv.writer(fg)
        wm.writerow(["path", "subject_id", "stage"])
        wg.writerow(["source_path", "target_stage", "gt_path"])
        for s in samples:
            stem = f"sub{s.subject_id:04d}_stage{s.label.index}_scan{s.scan}"
            rel = f"volumes/{stem}.mpgv"
            save_volume(s.volume, out / rel)
            wm.writerow([rel, s.subject_id, s.label.index])
            for t in range(s.label.K):
                if t == s.label.index:
                    continue
                grel = f"gt/{stem}_to{t}.mpgv"
                save_volume(s.gt_normalized(t), out / grel)
                wg.writerow([rel, t, grel])
    return out / MANIFEST


@dataclass(frozen=True)
class Record:
    """One manifest row, loaded."""

    path: str
    subject_id: int
    label: ClassLabel
    volume: Volume
    gt: dict = field(default_factory=dict, repr=False)

    def gt_normalized(self, target: int) -> np.ndarray:
        return self.gt[target]


def read_dataset(manifest, K: int | None = None, with_gt: bool = True) -> list[Record]:
    manifest = Path(manifest)
    root = manifest.parent
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if K is None:
        K = max(int(r["stage"]) for r in rows) + 1
    gt: dict[str, dict[int, np.ndarray]] = {}
    gt_path = root / GT_MANIFEST
    if with_gt and gt_path.exists():
        with open(gt_path, newline="") as fh:
            for r in csv.DictReader(fh):
                gt.setdefault(r["source_path"], {})[int(r["target_stage"])] = read_array(root / r["gt_path"])
    return [
        Record(
            path=r["path"],
            subject_id=int(r["subject_id"]),
            label=ClassLabel(int(r["stage"]), K),
            volume=Volume(read_array(root / r["path"])),
            gt=gt.get(r["path"], {}),
        )
        for r in rows
    ]
