import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgan.errors import LesionOutOfBounds, TooFewSubjects
from mpgan.phantom import (
    LesionSite,
    PhantomSpec,
    default_sites,
    generate_dataset,
    lesion_atlas,
    read_dataset,
    sphere_mask,
    split_by_subject,
    subject_sites,
    write_dataset,
)


def one_lesion(**kw):
    site = LesionSite((8, 8, 8), 3.0, (0.0, -0.5))
    base = dict(shape=(16, 16, 16), K=2, lesion_sites=[site], noise_sigma=0.0,
                subject_count=3, center_jitter=0)
    base.update(kw)
    return PhantomSpec(**base), site


def test_gt_example_inside_and_outside():
    spec, site = one_lesion()
    s0 = next(s for s in generate_dataset(spec) if s.label.index == 0)
    gt = s0.gt_map_to[1]
    inside = sphere_mask(spec.shape, site.center, site.radius)
    assert np.all(gt[inside] == -0.5) and np.all(gt[~inside] == 0)


def test_self_map_is_zero():
    spec, _ = one_lesion()
    for s in generate_dataset(spec):
        assert not np.any(s.gt_map_to[s.label.index])


def test_same_subject_difference_equals_field_difference():
    spec, _ = one_lesion()
    data = generate_dataset(spec)
    a, b = [s for s in data if s.subject_id == 1]
    np.testing.assert_allclose(b.raw - a.raw, a.stage_fields[1] - a.stage_fields[0], atol=1e-12)


def test_noise_free_gt_reproduces_target():
    spec = PhantomSpec(shape=(16, 16, 16), K=3, noise_sigma=0.0, subject_count=2,
                       lesion_sites=[LesionSite((8, 8, 5), 2, (-0.1, -0.2, -0.6)),
                                     LesionSite((8, 8, 11), 2, (-0.2, -0.2, -0.5))],
                       sites_per_subject=None, center_jitter=1)
    data = generate_dataset(spec)
    for s in data:
        for t in range(3):
            other = next(o for o in data if o.subject_id == s.subject_id and o.label.index == t)
            np.testing.assert_allclose(s.raw + s.gt_map_to[t], other.raw, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gt_antisymmetry_and_transitivity(seed):
    spec = PhantomSpec(shape=(16, 16, 16), K=3, anatomy_seed=seed, subject_count=1, noise_sigma=0.0,
                       lesion_sites=[LesionSite((8, 8, 8), 3, (-0.1, -0.4, -0.9))])
    by_stage = {s.label.index: s for s in generate_dataset(spec)}
    for s in range(3):
        for t in range(3):
            np.testing.assert_array_equal(by_stage[s].gt_map_to[t], -by_stage[t].gt_map_to[s])
            for u in range(3):
                np.testing.assert_allclose(by_stage[s].gt_map_to[u],
                                           by_stage[s].gt_map_to[t] + by_stage[t].gt_map_to[u], atol=1e-12)


def test_deterministic():
    spec = PhantomSpec(shape=(12, 12, 12), subject_count=4,
                       lesion_sites=[LesionSite((6, 6, 6), 2, (-0.3, -0.9))])
    a, b = generate_dataset(spec), generate_dataset(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.volume.data, y.volume.data)
    c = generate_dataset(PhantomSpec(**{**spec.__dict__, "anatomy_seed": 1}))
    assert not np.array_equal(a[0].volume.data, c[0].volume.data)


def test_default_desk_spec():
    spec = PhantomSpec()
    assert spec.shape == (24, 24, 24) and spec.K == 2 and spec.subject_count == 100
    assert spec.noise_sigma == 0.05 and spec.scans_per_subject == 1
    assert len(spec.lesion_sites) == 6
    data = generate_dataset(PhantomSpec(subject_count=3))
    assert len(data) == 6
    for s in data:
        assert s.volume.data.min() == -1 and s.volume.data.max() == 1


def test_subjects_differ_in_site():
    spec = PhantomSpec(subject_count=30)
    used = {tuple(subject_sites(spec, i)) for i in range(30)}
    assert len(used) > 3


def test_gt_normalized_scale():
    spec, _ = one_lesion(noise_sigma=0.05)
    s = generate_dataset(spec)[0]
    np.testing.assert_allclose(s.gt_normalized(1), s.gt_map_to[1] * s.scale, rtol=1e-6)


def test_invariants_enforced():
    with pytest.raises(ValueError):
        LesionSite((8, 8, 8), 2, (-0.5, -0.2))
    with pytest.raises(LesionOutOfBounds):
        PhantomSpec(shape=(16, 16, 16), lesion_sites=[LesionSite((2, 8, 8), 3, (0, -1))])
    with pytest.raises(LesionOutOfBounds):
        PhantomSpec(shape=(12, 12, 12))  # default sites do not fit
    for site in default_sites((24, 24, 24), 5):
        assert np.all(np.diff(np.abs(site.deltas)) >= 0)


def test_split_example():
    spec = PhantomSpec(shape=(12, 12, 12), subject_count=10,
                       lesion_sites=[LesionSite((6, 6, 6), 2, (-0.3, -0.9))])
    tr, va, te = split_by_subject(generate_dataset(spec), seed=0)
    assert [len({s.subject_id for s in p}) for p in (tr, va, te)] == [8, 1, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 60), st.integers(0, 1000))
def test_split_is_partition_by_subject(n_subjects, seed):
    class S:
        def __init__(self, sid, k):
            self.subject_id, self.k = sid, k

    samples = [S(i, k) for i in range(n_subjects) for k in range(2)]
    tr, va, te = split_by_subject(samples, seed=seed)
    ids = [set(s.subject_id for s in p) for p in (tr, va, te)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sorted(map(id, tr + va + te)) == sorted(map(id, samples))
    again = split_by_subject(samples, seed=seed)
    assert [[id(s) for s in p] for p in again] == [[id(s) for s in p] for p in (tr, va, te)]


def test_split_errors():
    spec, _ = one_lesion(subject_count=1)
    with pytest.raises(TooFewSubjects):
        split_by_subject(generate_dataset(spec))
    with pytest.raises(ValueError):
        split_by_subject([], fractions=(0.5, 0.4, 0.2))


def test_disk_roundtrip(tmp_path):
    spec, _ = one_lesion(noise_sigma=0.05, K=2)
    data = generate_dataset(spec)
    manifest = write_dataset(data, tmp_path)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "path,subject_id,stage"
    assert len(lines) - 1 == spec.subject_count * spec.K * spec.scans_per_subject
    recs = read_dataset(manifest)
    for r, s in zip(recs, data):
        assert r.subject_id == s.subject_id and r.label == s.label
        np.testing.assert_array_equal(r.volume.data, s.volume.data)
        np.testing.assert_array_equal(r.gt_normalized(1 - s.label.index), s.gt_normalized(1 - s.label.index))


def test_atlas_covers_sites():
    spec = PhantomSpec()
    atlas = lesion_atlas(spec)
    assert set(np.unique(atlas.labels)) == set(range(7))
    for i, site in enumerate(spec.lesion_sites):
        assert atlas.labels[site.center] == i + 1
