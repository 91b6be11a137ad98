import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poclab._rng import make_rng
from poclab.data import (PRESETS, AtomicTeachers, BooleanFn, Dataset, GaussianIso, ManifoldCircle, RademacherCube,
                         SingleIndex, covariates_from_config, eval_target, init_particles, preset, sample_dataset,
                         second_layer_scale, target_from_config, teacher_atoms)
from poclab.kernels import LinkFunction

HE4 = LinkFunction((0, 0, 0, 0, 1.0))


def test_make_rng_is_keyed_and_reproducible():
    a = make_rng(3, "init").standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(3, "init").standard_normal(5))
    assert not np.array_equal(a, make_rng(3, "data").standard_normal(5))
    assert not np.array_equal(a, make_rng(4, "init").standard_normal(5))


@given(st.integers(2, 12), st.integers(1, 40), st.integers(0, 10 ** 6))
def test_init_particles_unit_and_prefix_stable(d, m, seed):
    big = init_particles(d, m + 7, seed, second_layer=2.0)
    small = init_particles(d, m, seed, second_layer=2.0)
    np.testing.assert_allclose(np.linalg.norm(big.weights, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(small.weights, big.weights[:m])
    np.testing.assert_array_equal(small.b, big.b[:m])
    assert set(np.abs(small.b)) == {2.0}


def test_init_particles_rejects_empty():
    with pytest.raises(ValueError):
        init_particles(4, 0, 0)


def test_second_layer_scale():
    assert second_layer_scale(None) is None
    assert second_layer_scale("ones") is None
    assert second_layer_scale(1.5) == 1.5
    assert second_layer_scale({"signs": 3}) == 3.0
    assert second_layer_scale({"parity": 4}) == pytest.approx(16 / 2)
    with pytest.raises(ValueError):
        second_layer_scale("sometimes")


@pytest.mark.parametrize("name", PRESETS)
def test_presets_build_and_evaluate(name):
    s = preset(name, 8)
    X = s.covariates.sample(16, make_rng(0, "x"))
    y = s.target(X)
    assert y.shape == (16,) and np.all(np.isfinite(y))


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("ring", 8)


def test_single_index_value():
    t = SingleIndex(HE4, np.eye(3)[1])
    x = np.array([0.3, 1.7, -2.0])
    assert eval_target(t, x) == pytest.approx(1.7 ** 4 - 6 * 1.7 ** 2 + 3)


def test_circle_target_matches_angular_average():
    # E_theta He4(r cos theta) = (3/8) r^4 - 3 r^2 + 3 for the in-plane radius r
    t = ManifoldCircle(HE4, np.eye(5)[:2])
    X = make_rng(1, "x").standard_normal((20, 5))
    r2 = X[:, 0] ** 2 + X[:, 1] ** 2
    np.testing.assert_allclose(t(X), 0.375 * r2 ** 2 - 3 * r2 + 3, rtol=1e-12, atol=1e-12)


def test_boolean_targets():
    x = np.array([[1.0, -1, -1, 1, 1], [1, 1, 1, -1, -1]])
    xor = BooleanFn("xor", (0, 1, 2, 3))
    np.testing.assert_array_equal(xor(x), [1.0, -1.0])
    stair = BooleanFn("staircase", (0, 1, 2, 3), (0.25, 0.75), (1, 4))
    np.testing.assert_allclose(stair(x), [0.25 + 0.75, 0.25 - 0.75])
    with pytest.raises(ValueError):
        BooleanFn("xor", (0, 0))
    with pytest.raises(ValueError):
        BooleanFn("parity", (0, 1))
    with pytest.raises(ValueError):
        teacher_atoms(xor)


def test_atomic_teacher_validation():
    T = np.eye(3)[:2]
    with pytest.raises(ValueError):
        AtomicTeachers(T, np.array([0.5, 0.6]), HE4)
    with pytest.raises(ValueError):
        AtomicTeachers(2 * T, np.array([0.5, 0.5]), HE4)
    with pytest.raises(ValueError):
        AtomicTeachers(T, np.array([1.0]), HE4)
    t = AtomicTeachers(T, np.array([0.5, 0.5]), HE4)
    assert target_from_config(t.to_config()).weights.tolist() == [0.5, 0.5]


def test_config_round_trips():
    for t in (SingleIndex(HE4, np.eye(4)[0]), ManifoldCircle(HE4, np.eye(4)[:2]),
              BooleanFn("staircase", (0, 1, 2), (0.5, 0.5), (1, 3))):
        t2 = target_from_config(t.to_config())
        X = RademacherCube(4).sample(8, make_rng(0, "x"))
        np.testing.assert_array_equal(t(X), t2(X))
    assert covariates_from_config({"kind": "rademacher", "d": 5}) == RademacherCube(5)
    with pytest.raises(ValueError):
        covariates_from_config({"kind": "laplace", "d": 5})
    with pytest.raises(ValueError):
        target_from_config({"kind": "mystery"})
    with pytest.raises(ValueError):
        GaussianIso(1)


def test_rademacher_entries():
    X = RademacherCube(6).sample(100, make_rng(0, "x"))
    assert set(np.unique(X)) == {-1.0, 1.0}


def test_dataset_sampling_and_io(tmp_path):
    s = preset("he4", 6)
    a = sample_dataset(s.covariates, s.target, 50, 9)
    b = sample_dataset(s.covariates, s.target, 50, 9)
    np.testing.assert_array_equal(a.xs, b.xs)
    np.testing.assert_array_equal(a.ys, s.target(a.xs))
    a.save(tmp_path / "d.bin")
    c = Dataset.load(tmp_path / "d.bin")
    np.testing.assert_array_equal(c.xs, a.xs)
    np.testing.assert_array_equal(c.ys, a.ys)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        Dataset.load(tmp_path / "bad.bin")
    a.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0].endswith(",y")


def test_dataset_validation():
    s = preset("he4", 6)
    with pytest.raises(ValueError):
        sample_dataset(GaussianIso(5), s.target, 10, 0)
    with pytest.raises(ValueError):
        sample_dataset(s.covariates, s.target, 0, 0)
    with pytest.raises(ValueError):
        sample_dataset(RademacherCube(3), BooleanFn("xor", (0, 1, 2, 3)), 10, 0)
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 1.0]]), np.ones(1))


def test_label_noise_is_seeded():
    t = SingleIndex(HE4, np.eye(3)[0], noise_std=0.5)
    a = sample_dataset(GaussianIso(3), t, 200, 1)
    b = sample_dataset(GaussianIso(3), t, 200, 1)
    np.testing.assert_array_equal(a.ys, b.ys)
    assert 0.3 < np.std(a.ys - t(a.xs)) < 0.7
