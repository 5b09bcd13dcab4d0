import numpy as np
import pytest
from scipy import stats

from metapatch.attacks import ifgsm
from metapatch.data import synth_dataset
from metapatch.meta import MetaSet, init_meta_set, reptile_update, sample_step_sizes, select
from metapatch.model import Architecture, Classifier, build_model
from metapatch.perturbation import PerturbationSpec, apply, sample_offsets
from metapatch.training import SGD, TrainConfig, mat_step

SPEC = PerturbationSpec.patch((3, 8, 8), (4, 4), (2, 2))
ARCH = Architecture(widths=(4, 8), num_classes=3, input_shape=(3, 8, 8), groups=2)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(6, num_classes=3, resolution=(8, 8), seed=0)


@pytest.fixture()
def model():
    return Classifier(build_model(ARCH, 0))


def log_uniform_ks(alphas, low=1e-4, high=0.1):
    u = (np.log(alphas) - np.log(low)) / (np.log(high) - np.log(low))
    return stats.kstest(u, "uniform").statistic


@pytest.mark.parametrize("P, mode", [(1, "random"), (7, "data"), (64, "data")])
def test_round_robin_targets(data, P, mode):
    meta = init_meta_set(P, data, mode, SPEC, np.random.default_rng(0))
    assert meta.targets.tolist() == [i % 3 for i in range(1, P + 1)]


def test_data_init_uses_target_class_datapoints(data):
    meta = init_meta_set(6, data, "data", SPEC, np.random.default_rng(1))
    from metapatch.perturbation import from_datapoint
    for e in meta.entries:
        candidates = [from_datapoint(data.images[i], SPEC) for i in data.indices_of(e.target)]
        assert any(np.array_equal(e.patch, c) for c in candidates)


def test_step_sizes_log_uniform():
    a = sample_step_sizes(np.random.default_rng(0), 10000)
    assert a.min() >= 1e-4 and a.max() <= 0.1
    assert log_uniform_ks(a) < 0.02


def test_init_step_sizes_log_uniform(data):
    meta = init_meta_set(10000, data, "random", SPEC, np.random.default_rng(5))
    a = meta.step_sizes
    assert a.min() >= 1e-4 and a.max() <= 0.1
    assert log_uniform_ks(a) < 0.02


def test_empty_class_named(data):
    sub = data.subset(data.indices_of(0))
    with pytest.raises(ValueError, match=data.class_name(1)):
        init_meta_set(2, sub, "data", SPEC, np.random.default_rng(0))


def brute_force_select(meta, x, y, model, F, rng):
    """One sample at a time, replaying the same draws: F trials, first strict maximum wins."""
    n = len(x)
    draws = []
    for _ in range(F):
        draws.append((rng.integers(len(meta), size=n), sample_offsets(meta.spec, rng, n)))
    if F == 1:
        return draws[0]
    idx, off = np.empty(n, int), np.empty((n, 2), int)
    for s in range(n):
        losses = []
        for ids, offs in draws:
            xs = apply(x[s], meta[ids[s]].patch, offs[s], meta.spec)[None]
            losses.append(model.losses(xs, y[s:s + 1])[0])
        best = int(np.argmax(losses))  # first maximum, as with strict improvement
        idx[s], off[s] = draws[best][0][s], draws[best][1][s]
    return idx, off


@pytest.mark.parametrize("F", [1, 2, 5])
def test_select_matches_brute_force(data, model, F):
    meta = init_meta_set(9, data, "random", SPEC, np.random.default_rng(3))
    x, y = data.images[:8], data.labels[:8]
    for seed in range(5):
        got = select(meta, x, y, model, F, np.random.default_rng(seed))
        want = brute_force_select(meta, x, y, model, F, np.random.default_rng(seed))
        np.testing.assert_array_equal(got[0], want[0])
        np.testing.assert_array_equal(got[1], want[1])


def test_select_forward_cost(data, model):
    meta = init_meta_set(4, data, "random", SPEC, np.random.default_rng(0))
    x, y = data.images[:5], data.labels[:5]
    select(meta, x, y, model, 1, np.random.default_rng(0))
    assert model.counters.n_fp == 0
    select(meta, x, y, model, 5, np.random.default_rng(0))
    assert (model.counters.n_fp, model.counters.n_bp) == (25, 0)


def test_reptile_update_exact():
    rng = np.random.default_rng(0)
    xi = rng.uniform(0.2, 0.8, size=SPEC.shape)
    finals = [rng.uniform(0.2, 0.8, size=SPEC.shape) for _ in range(3)]
    for sigma in (0.0, 0.25, 0.5, 1.0):
        want = (1 - sigma) * xi + sigma * ((finals[0] + finals[1] + finals[2]) / 3)
        np.testing.assert_array_equal(reptile_update(xi, finals, sigma, SPEC), want)


def test_reptile_projects():
    xi = np.ones(SPEC.shape)
    out = reptile_update(xi, [np.full(SPEC.shape, 3.0)], 0.5, SPEC)
    assert out.max() == 1.0


def test_reptile_rejects_bad_sigma():
    with pytest.raises(ValueError, match="sigma"):
        reptile_update(np.zeros(SPEC.shape), [np.zeros(SPEC.shape)], 1.5, SPEC)


def test_uat_degeneration_bit_exact(data):
    """P=1, K=1, sigma=1: the new meta-patch is exactly the one-step I-FGSM result."""
    cfg = TrainConfig.for_method("UAT")
    rng = np.random.default_rng(11)
    meta = init_meta_set(1, data, "random", SPEC, rng)
    meta.entries[0].step_size = cfg.alpha
    params = build_model(ARCH, 0)
    before = meta.copy()
    frozen = Classifier(params.copy())
    x, y = data.images[:1], data.labels[:1]
    replay = np.random.default_rng(11)
    replay.bit_generator.state = rng.bit_generator.state
    model = Classifier(params)
    mat_step(model, SGD(params, 0.1, 0.9, 0.0, 10), x, y, meta, cfg, SPEC, rng)
    idx, off = select(before, x, y, frozen, 1, replay)
    xi1 = ifgsm(before.patches(idx), x, y, frozen, before.step_sizes[idx], off, 1, SPEC)
    assert meta.entries[0].patch.dtype == xi1.dtype
    assert meta.entries[0].patch.tobytes() == xi1[0].tobytes()


def test_metaset_round_trip(tmp_path, data):
    meta = init_meta_set(5, data, "data", SPEC, np.random.default_rng(0))
    meta.save(tmp_path / "meta")
    back = MetaSet.load(tmp_path / "meta")
    assert back.targets.tolist() == meta.targets.tolist()
    assert back.step_sizes.tobytes() == meta.step_sizes.tobytes()
    assert back.patches(range(5)).tobytes() == meta.patches(range(5)).tobytes()
