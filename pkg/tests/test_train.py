import csv
import itertools

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from mpgan.errors import DegenerateK, EmptyClass, IoFailure, NonFiniteLoss, VersionMismatch
from mpgan.metrics import ssim
from mpgan.nets import ClassifierSpec, DiscriminatorSpec, GeneratorSpec
from mpgan.phantom import LesionSite, PhantomSpec, generate_dataset, split_by_subject
from mpgan.train import (
    ModelSpec,
    TrainConfig,
    VolumeSet,
    c_update,
    checkpoint,
    d_update,
    draw_batch,
    fit,
    frozen,
    g_terms,
    g_update,
    init_state,
    make_batch,
    resume,
    sample_target,
    train_step,
    validate,
)
from mpgan.volume import ClassLabel

MICRO = PhantomSpec(shape=(8, 8, 8), K=2, subject_count=10, center_jitter=0,
                    lesion_sites=[LesionSite((4, 4, 2), 1.5, (-0.3, -0.9)),
                                  LesionSite((4, 4, 5), 1.5, (-0.3, -0.9))])
MODEL = ModelSpec(GeneratorSpec(K=2, base_channels=2), ClassifierSpec(K=2, depth=10, growth_rate=2),
                  DiscriminatorSpec(base_channels=2))


@pytest.fixture(scope="module")
def micro():
    tr, va, te = split_by_subject(generate_dataset(MICRO), seed=0)
    return VolumeSet(tr, 2), VolumeSet(va, 2)


def params(m):
    return [p.detach().clone() for p in m.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------- target schedule

def test_sample_target_examples():
    rng = np.random.default_rng(0)
    assert all(sample_target(ClassLabel(0, 2), rng) == 1 for _ in range(50))
    assert all(sample_target(ClassLabel(2, 5), rng) != 2 for _ in range(500))
    with pytest.raises(DegenerateK):
        sample_target(ClassLabel(0, 1), rng)


def test_multidirectional_schedule():
    """10^5 (source, target) draws with K=5: all 20 pairs seen, targets uniform."""
    K, n = 5, 100_000
    rng = np.random.default_rng(2024)
    src = rng.integers(0, K, n)
    tar = np.array([sample_target(int(y), rng, K) for y in src])
    pairs = set(zip(src.tolist(), tar.tolist()))
    assert pairs == {(a, b) for a, b in itertools.product(range(K), repeat=2) if a != b}
    for y in range(K):
        counts = np.bincount(tar[src == y], minlength=K)
        assert counts[y] == 0
        others = np.delete(counts, y)
        freq = others / others.sum()
        assert np.all(np.abs(freq - 0.25) < 0.01)
        assert chisquare(others).pvalue > 0.01


# ---------------------------------------------------------------- single step

def test_zero_learning_rates_leave_params(micro):
    tr, _ = micro
    st = init_state(TrainConfig(lr_G=0, lr_C=0, lr_D=0, batch_size=4), MODEL)
    before = [params(m) for m in (st.G, st.C, st.D)]
    rep = train_step(st, tr, [0, 1, 2, 3])
    assert np.isfinite(rep.total_G)
    for m, b in zip((st.G, st.C, st.D), before):
        assert same(params(m), b)


def test_update_isolation(micro):
    tr, _ = micro
    st = init_state(TrainConfig(batch_size=4), MODEL)
    b = make_batch(st, tr, [0, 1, 2, 3])
    snap = lambda: [params(m) for m in (st.G, st.C, st.D)]
    with torch.no_grad():
        x_fake = b.x + st.G(b.x, torch.nn.functional.one_hot(torch.as_tensor(b.y_tar), 2).float())

    s0 = snap()
    d_update(st, b, x_fake)
    s1 = snap()
    assert same(s1[0], s0[0]) and same(s1[1], s0[1]) and not same(s1[2], s0[2])
    c_update(st, b)
    s2 = snap()
    assert same(s2[0], s1[0]) and not same(s2[1], s1[1]) and same(s2[2], s1[2])
    bufs = [b_.clone() for b_ in st.C.buffers()] + [b_.clone() for b_ in st.D.buffers()]
    g_update(st, b)
    s3 = snap()
    assert not same(s3[0], s2[0]) and same(s3[1], s2[1]) and same(s3[2], s2[2])
    # the G step leaves C's and D's batch-norm statistics alone too
    after = list(st.C.buffers()) + list(st.D.buffers())
    assert all(torch.equal(u, v) for u, v in zip(bufs, after))
    assert all(p.requires_grad for p in itertools.chain(st.C.parameters(), st.D.parameters()))


def test_generator_step_decreases_objective(micro):
    tr, _ = micro
    st = init_state(TrainConfig(lr_G=1e-4, lr_C=0, lr_D=0, batch_size=4), MODEL)
    b = make_batch(st, tr, [0, 1, 2, 3])
    with frozen(st.C, st.D), torch.no_grad():
        before = float(g_terms(st, b)["total_G"])
    g_update(st, b)
    with frozen(st.C, st.D), torch.no_grad():
        after = float(g_terms(st, b)["total_G"])
    assert after < before


def test_non_finite_loss_aborts(micro):
    tr, _ = micro
    st = init_state(TrainConfig(batch_size=2), MODEL)
    bad = VolumeSet(tr.samples[:4], 2)
    bad.x = bad.x.clone()
    bad.x[0, 0, 0, 0, 0] = float("nan")
    D_before = params(st.D)
    with pytest.raises(NonFiniteLoss, match="adv"):
        train_step(st, bad, [0, 1])
    assert same(params(st.D), D_before)


def test_batch_references_same_subject(micro):
    tr, _ = micro
    st = init_state(TrainConfig(), MODEL)
    b = make_batch(st, tr, [0, 1, 2])
    for i in range(3):
        partner = [j for j in range(len(tr)) if tr.subjects[j] == tr.subjects[i] and tr.y[j] == b.y_tar[i]]
        assert torch.equal(b.x_tar_real[i], tr.x[partner[0]])


def test_config_rejects_fast_discriminator():
    with pytest.raises(ValueError):
        TrainConfig(lr_G=1e-4, lr_D=1e-3)


# ---------------------------------------------------------------- determinism and checkpoints

def run_steps(st, data, n):
    return [train_step(st, data, draw_batch(st.rng, len(data), st.config.batch_size)).row() for _ in range(n)]


def test_runs_are_reproducible(micro):
    tr, _ = micro
    a = run_steps(init_state(TrainConfig(batch_size=4, seed=7), MODEL), tr, 4)
    b = run_steps(init_state(TrainConfig(batch_size=4, seed=7), MODEL), tr, 4)
    c = run_steps(init_state(TrainConfig(batch_size=4, seed=8), MODEL), tr, 4)
    assert a == b and a != c


def test_resume_continues_bit_for_bit(micro, tmp_path):
    tr, _ = micro
    cfg = TrainConfig(batch_size=4, seed=3)
    ref = init_state(cfg, MODEL)
    stream = run_steps(ref, tr, 5)

    st = init_state(cfg, MODEL)
    run_steps(st, tr, 3)
    checkpoint(st, tmp_path / "c.npz")
    back = resume(tmp_path / "c.npz")
    assert back.step == 3
    assert run_steps(back, tr, 2) == stream[3:]


def test_resume_errors(tmp_path):
    with pytest.raises(IoFailure):
        resume(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(VersionMismatch):
        resume(tmp_path / "junk.npz")


# ---------------------------------------------------------------- validation and fit

def test_validate_identity_is_perfect(micro):
    _, va = micro
    st = init_state(TrainConfig(), MODEL)
    with torch.no_grad():
        st.G.out.weight.zero_()
        st.G.out.bias.zero_()
    assert validate(st, va, targets=list(va.y)) == pytest.approx(1.0)


def test_validate_noise_ordering():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (8, 8, 8))
    assert ssim(x, x + rng.normal(0, 0.1, x.shape)) < ssim(x, x + rng.normal(0, 0.01, x.shape))


def test_validate_needs_every_class(micro):
    tr, _ = micro
    only0 = VolumeSet([s for s in tr.samples if s.label.index == 0], 2)
    with pytest.raises(EmptyClass):
        validate(init_state(TrainConfig(), MODEL), only0)


def test_fit_writes_logs_and_best_history(micro, tmp_path):
    tr, va = micro
    st = init_state(TrainConfig(batch_size=4, max_steps=12, val_every=3, patience=100), MODEL)
    fit(st, tr, va, run_dir=tmp_path, checkpoint_every=5)
    rows = list(csv.reader(open(tmp_path / "losses.csv")))
    assert len(rows) == 13 and rows[0][0] == "step"
    hist = [float(r[1]) for r in list(csv.reader(open(tmp_path / "checkpoints" / "best_history.csv")))[1:]]
    assert hist and all(b > a for a, b in zip(hist, hist[1:]))
    assert (tmp_path / "checkpoints" / "best.npz").exists()
    assert resume(tmp_path / "checkpoints" / "last.npz").step == 12
    assert resume(tmp_path / "checkpoints" / "best.npz").best_val_ssim == pytest.approx(hist[-1])


def test_fit_early_stop(micro):
    tr, va = micro
    st = init_state(TrainConfig(lr_G=0, lr_C=0, lr_D=0, batch_size=4, max_steps=100, val_every=1, patience=2), MODEL)
    fit(st, tr, va)
    # nothing changes, so the score never improves after the first check
    assert st.step == 3
