import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapatch.attacks import (
    AttackConfig,
    estimate_rho,
    ifgsm,
    low_pass,
    low_pass_linear,
    radial_mask,
    spgd,
    step_sizes,
    transfer_attack,
)
from metapatch.data import synth_dataset
from metapatch.model import Architecture, Classifier, build_model
from metapatch.perturbation import PerturbationSpec, apply_batch, sample_offsets
from stubs import LinearModel

SPEC = PerturbationSpec.patch((3, 8, 8), (4, 4), (2, 2))
LP_TOL = 1e-6


@pytest.fixture(scope="module")
def data():
    return synth_dataset(4, num_classes=2, resolution=(8, 8), seed=0)


# -- low-pass filter -------------------------------------------------------------


def lp_arrays():
    return st.tuples(st.integers(1, 3), st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31))


@settings(max_examples=80, deadline=None)
@given(shape=lp_arrays(), cutoff=st.floats(0, 10))
def test_low_pass_linear_idempotent(shape, cutoff):
    c, h, w, seed = shape
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    once = low_pass_linear(x, cutoff)
    assert np.abs(low_pass_linear(once, cutoff) - once).max() < LP_TOL


@settings(max_examples=80, deadline=None)
@given(shape=lp_arrays(), cutoff=st.floats(0, 10))
def test_low_pass_energy_never_increases(shape, cutoff):
    c, h, w, seed = shape
    x = np.random.default_rng(seed).uniform(size=(c, h, w))
    spec = PerturbationSpec.patch((c, h, w), (h, w))
    assert (low_pass_linear(x, cutoff) ** 2).sum() <= (x ** 2).sum() + LP_TOL
    assert (low_pass(x, cutoff, spec) ** 2).sum() <= (x ** 2).sum() + LP_TOL


def test_projected_low_pass_idempotent_in_range():
    spec = PerturbationSpec.patch((3, 8, 8), (8, 8))
    x = 0.5 + 0.1 * np.random.default_rng(0).normal(size=(3, 8, 8))
    once = low_pass(x, 3, spec)
    assert np.abs(low_pass(once, 3, spec) - once).max() < LP_TOL


@pytest.mark.parametrize("h, w", [(8, 8), (5, 7), (24, 24)])
def test_all_pass_is_identity(h, w):
    x = np.random.default_rng(1).uniform(size=(3, h, w))
    cutoff = np.hypot(h / 2, w / 2)
    assert radial_mask(h, w, cutoff).all()
    assert np.abs(low_pass_linear(x, cutoff) - x).max() < LP_TOL


@pytest.mark.parametrize("h, w", [(8, 8), (5, 7)])
def test_zero_cutoff_gives_channel_means(h, w):
    x = np.random.default_rng(2).uniform(size=(3, h, w))
    out = low_pass_linear(x, 0)
    want = np.broadcast_to(x.mean(axis=(1, 2))[:, None, None], x.shape)
    assert np.abs(out - want).max() < LP_TOL


def test_low_pass_is_self_adjoint():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3, 6, 6))
    assert abs((low_pass_linear(a, 2) * b).sum() - (a * low_pass_linear(b, 2)).sum()) < 1e-10


# -- I-FGSM and S-PGD ------------------------------------------------------------


def test_ifgsm_steps_by_sign_and_projects():
    w = np.zeros(SPEC.image_shape)
    w[:, :4] = 1.0  # upper half pushes up, lower half down
    w[:, 4:] = -1.0
    model = LinearModel(w)
    x = np.full((1,) + SPEC.image_shape, 0.5)
    xi = np.full(SPEC.shape, 0.5)
    out = ifgsm(xi, x[0], 0, model, 0.2, (0, 0), 1, SPEC)
    # window rows 2..5: rows 2, 3 have w = +1, rows 4, 5 have w = -1
    np.testing.assert_allclose(out[:, :2], 0.7)
    np.testing.assert_allclose(out[:, 2:], 0.3)
    out = ifgsm(xi, x[0], 0, model, 0.2, (0, 0), 5, SPEC)
    assert out[:, :2].max() == 1.0 and out[:, 2:].min() == 0.0
    out_t = ifgsm(xi, x[0], 0, model, 0.2, (0, 0), 1, SPEC, targeted=True)
    np.testing.assert_allclose(out_t[:, :2], 0.3)


def test_ifgsm_zero_steps_is_identity():
    xi = np.random.default_rng(0).uniform(size=SPEC.shape)
    out = ifgsm(xi, np.zeros(SPEC.image_shape), 0, LinearModel(np.ones(SPEC.image_shape)), 0.1, (0, 0), 0, SPEC)
    np.testing.assert_array_equal(out, xi)


def test_step_schedule_geometric():
    a = step_sizes(AttackConfig(steps=5, step_size=0.1, total_decay=0.01))
    np.testing.assert_allclose(a, 0.1 * 0.01 ** (np.arange(5) / 4))
    assert a[0] == 0.1 and abs(a[-1] - 0.001) < 1e-15


def test_config_validation_and_family():
    with pytest.raises(ValueError, match="momentum"):
        AttackConfig(momentum=1.0)
    assert AttackConfig(init="data").family == "DI"
    assert AttackConfig(init="data", cutoff=2).family == "LF"
    assert AttackConfig().family == "RI"
    c = AttackConfig(step_size=0.1)
    assert AttackConfig.from_dict(c.to_dict()).config_id == c.config_id != AttackConfig().config_id


def test_spgd_saturates_linear_objective(data):
    w = np.ones(SPEC.image_shape)
    model = LinearModel(w)
    cfg = AttackConfig(steps=40, step_size=0.1, momentum=0.9, batch_size=4)
    res = spgd(model, data, SPEC, cfg, np.random.default_rng(0))
    assert len(res.trajectory) == 41
    assert res.patch.min() == 1.0  # every pixel pushed to the upper bound


def test_spgd_targeted_and_low_pass(data):
    model = LinearModel(np.ones(SPEC.image_shape))
    cfg = AttackConfig(steps=30, step_size=0.2, batch_size=4, target=1, cutoff=0)
    res = spgd(model, data, SPEC, cfg, np.random.default_rng(0))
    # targeted ascent on -loss drives the patch down; zero cutoff keeps it flat per channel
    applied = res.applied_patch
    assert applied.max() < 0.05
    assert np.ptp(applied.reshape(3, -1), axis=1).max() < 1e-6


def test_spgd_reduces_accuracy_of_real_model(data):
    arch = Architecture(widths=(4, 8), num_classes=2, input_shape=(3, 8, 8), groups=2)
    model = Classifier(build_model(arch, 0))
    cfg = AttackConfig(steps=20, step_size=0.1, batch_size=8)
    res = spgd(model, data, SPEC, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x, y = data.images, data.labels
    off = sample_offsets(SPEC, rng, len(x))
    start = estimate_rho(model, np.full(SPEC.shape, 0.5, np.float32), x, y, off, SPEC)
    assert estimate_rho(model, res.patch, x, y, off, SPEC) > start


def test_spgd_is_seeded(data):
    model = LinearModel(np.random.default_rng(0).normal(size=SPEC.image_shape))
    cfg = AttackConfig(init="data", steps=5, batch_size=4, data_candidates=3)
    a = spgd(model, data, SPEC, cfg, np.random.default_rng(4))
    b = spgd(model, data, SPEC, cfg, np.random.default_rng(4))
    assert a.patch.tobytes() == b.patch.tobytes() and a.trajectory == b.trajectory
    assert a.init_source == "data"


def test_estimate_rho_matches_mean_loss(data):
    model = LinearModel(np.ones(SPEC.image_shape))
    xi = np.full(SPEC.shape, 0.25)
    off = np.zeros((len(data), 2), int)
    want = np.mean([apply_batch(data.images[i:i + 1], xi, off[:1], SPEC).sum() for i in range(len(data))])
    assert abs(estimate_rho(model, xi, data.images, data.labels, off, SPEC) - want) < 1e-4
    with pytest.raises(ValueError):
        estimate_rho(model, xi, data.images[:0], data.labels[:0], off[:0], SPEC)


def test_transfer_schedule(data):
    model = LinearModel(np.ones(SPEC.image_shape))
    cfg = AttackConfig(steps=2, batch_size=4)
    pool, sources = [], []
    rng = np.random.default_rng(0)
    for epoch in range(1, 11):
        sources += [r.init_source for r in transfer_attack(pool, model, data, SPEC, cfg, epoch, rng)]
    assert sources.count("empty-pool") + sources.count("pool") == 10
    assert sources.count("restart") == 2
    assert len(pool) == 12
