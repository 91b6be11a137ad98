import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poclab import dynamics as Y
from poclab.data import init_particles, preset, sample_dataset
from poclab.diagnostics import tangent_basis
from poclab.particles import ParticleSystem


def _move(w, q, h):
    x = w + h * q
    return x / np.linalg.norm(x)


def _fd_velocity(sysm, loss, i, h=1e-5):
    """-(m/2) times the tangent gradient of ``loss`` in particle i, by central differences."""
    Q = tangent_basis(sysm.weights[i])
    g = []
    for q in Q.T:
        Wp, Wm = sysm.weights.copy(), sysm.weights.copy()
        Wp[i] = _move(Wp[i], q, h)
        Wm[i] = _move(Wm[i], q, -h)
        g.append((loss(sysm.with_weights(Wp)) - loss(sysm.with_weights(Wm))) / (2 * h))
    return -(sysm.m / 2) * Q @ np.array(g)


@pytest.mark.parametrize("name,second", [("he4", None), ("misspecified", 1.5), ("six_teachers", None),
                                         ("circle", 2.0)])
def test_population_velocity_is_loss_gradient(name, second):
    s = preset(name, 6, seed=1)
    sysm = init_particles(6, 5, 2, second)
    V = Y.population_velocities(sysm, s.target, s.activation)

    def loss(x):
        return Y.loss_population(x, s.target, s.activation)

    for i in range(sysm.m):
        fd = _fd_velocity(sysm, loss, i)
        assert np.linalg.norm(fd - V[i]) <= 1e-6 * np.linalg.norm(V[i])
        np.testing.assert_allclose(V[i], sysm.b[i] * Y.population_velocity(sysm.weights[i], sysm, s.target,
                                                                          s.activation), rtol=1e-12, atol=1e-12)


def test_population_loss_against_monte_carlo():
    s = preset("misspecified", 5)
    sysm = init_particles(5, 7, 3, 1.0)
    X = s.covariates.sample(400_000, np.random.default_rng(0))
    r = (s.target(X) - Y.network_output(sysm, X, s.activation)) ** 2
    se = r.std() / np.sqrt(r.size)
    assert abs(r.mean() - Y.loss_population(sysm, s.target, s.activation)) < 5 * se


def test_population_loss_partner_subset_is_unbiased_estimate():
    s = preset("he4", 6)
    sysm = init_particles(6, 300, 0)
    exact = Y.loss_population(sysm, s.target, s.activation)
    approx = Y.loss_population(sysm, s.target, s.activation, exact_max_m=100, partners=150)
    assert approx == pytest.approx(exact, rel=0.2)


def test_empirical_velocity_single_point_matches_batch():
    s = preset("he4", 5)
    sysm = init_particles(5, 4, 1)
    X = np.random.default_rng(1).standard_normal((100, 5))
    y = s.target(X)
    V = Y.empirical_velocities(sysm, X, y, s.activation)
    for i in range(4):
        np.testing.assert_allclose(Y.empirical_velocity(sysm.weights[i], sysm, (X, y), s.activation), V[i],
                                   rtol=1e-10, atol=1e-12)
    with pytest.raises(ValueError):
        Y.empirical_velocities(sysm, X[:0], y[:0], s.activation)


def test_closed_form_unavailable_for_boolean_targets():
    s = preset("xor4", 6)
    prob = Y.ProblemSpec.from_setting(s, 4)
    assert not prob.closed_form
    with pytest.raises(Y.ClosedFormUnavailable):
        Y.run_flow(prob, Y.FlowSchedule(0.05, 2), 0)


@given(st.integers(2, 8), st.integers(1, 10), st.floats(0, 1), st.integers(0, 1000))
def test_step_stays_on_sphere(d, m, eta, seed):
    sysm = init_particles(d, m, seed)
    V = Y.project_rows(sysm.weights, np.random.default_rng(seed).standard_normal((m, d)) * 50)
    out = Y.step(sysm, V, eta)
    np.testing.assert_allclose(np.linalg.norm(out.weights, axis=1), 1.0, atol=1e-12)
    if eta == 0:
        np.testing.assert_allclose(out.weights, sysm.weights, atol=1e-15)


def test_step_rejects_radial_velocity():
    sysm = init_particles(3, 2, 0)
    with pytest.raises(ValueError):
        Y.step(sysm, sysm.weights, 0.1)
    with pytest.raises(ValueError):
        Y.step(sysm, np.zeros((3, 3)), 0.1)


def test_particle_system_validation():
    with pytest.raises(ValueError):
        ParticleSystem(np.ones((2, 3)))
    with pytest.raises(FloatingPointError):
        ParticleSystem(np.full((1, 2), np.nan))
    with pytest.raises(ValueError):
        ParticleSystem(np.eye(2), np.ones(3))
    with pytest.raises(ValueError):
        ParticleSystem(np.eye(2)).prefix(3)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Y.FlowSchedule(1.5, 10)
    with pytest.raises(ValueError):
        Y.FlowSchedule(0.1, 10, mode="online")
    with pytest.raises(ValueError):
        Y.FlowSchedule(0.1, 10, record_every=0)


def test_batch_order_epochs_cover_data():
    bo2 = Y.BatchOrder(10, 5, 5)
    epoch = np.concatenate([bo2.next(), bo2.next()])
    assert sorted(epoch.tolist()) == list(range(10))
    bo3 = Y.BatchOrder(10, 5, 5)
    np.testing.assert_array_equal(bo3.next(), Y.BatchOrder(10, 5, 5).next())
    np.testing.assert_array_equal(Y.BatchOrder(4, 0, 1).next(), np.arange(4))


def test_run_flow_records_and_is_deterministic():
    prob = Y.ProblemSpec.from_setting(preset("he4", 6), 8)
    sch = Y.FlowSchedule(0.01, 25, record_every=10)
    a = Y.run_flow(prob, sch, 3)
    b = Y.run_flow(prob, sch, 3)
    assert a.steps == [0, 10, 20, 25]
    assert a.times == pytest.approx([0, 0.1, 0.2, 0.25])
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
    assert a.loss_pop == b.loss_pop
    assert a.loss_pop[-1] < a.loss_pop[0]


def test_eta_zero_keeps_particles():
    prob = Y.ProblemSpec.from_setting(preset("he4", 6), 8)
    tr = Y.run_flow(prob, Y.FlowSchedule(0.0, 5), 0)
    np.testing.assert_allclose(tr.weights[0], tr.weights[-1], atol=1e-15)


def test_empirical_flow_uses_seeded_batches():
    prob = Y.ProblemSpec.from_setting(preset("he4", 6), 8, n_train=64)
    sch = Y.FlowSchedule(0.01, 6, batch_size=16, mode="empirical")
    a = Y.run_flow(prob, sch, Y.Seeds(1, 2, 3))
    b = Y.run_flow(prob, sch, Y.Seeds(1, 2, 3))
    c = Y.run_flow(prob, sch, Y.Seeds(1, 2, 4))
    np.testing.assert_array_equal(a.weights[-1], b.weights[-1])
    assert not np.array_equal(a.weights[-1], c.weights[-1])
    assert all(np.isfinite(a.loss_emp))
    data = sample_dataset(prob.covariates, prob.target, 64, 2)
    assert a.loss_emp[0] == Y.empirical_loss(a.system_at(0), data.xs, data.ys, prob.activation)


def test_numerical_abort_dumps_state(tmp_path, monkeypatch):
    prob = Y.ProblemSpec.from_setting(preset("he4", 4), 3)
    monkeypatch.setattr(Y.VelocityField, "__call__", lambda self, s, b: np.full(s.weights.shape, np.nan))
    with pytest.raises(Y.NumericalAbort) as info:
        Y.run_flow(prob, Y.FlowSchedule(0.01, 3), 0, dump_dir=tmp_path)
    dump = np.load(info.value.dump_path)
    assert dump["weights"].shape == (3, 4)


def test_checkpoints_round_trip(tmp_path):
    prob = Y.ProblemSpec.from_setting(preset("he4", 5), 4)
    sch = Y.FlowSchedule(0.01, 6, checkpoint_every=3)
    tr = Y.run_flow(prob, sch, 0, checkpoint_dir=tmp_path)
    assert len(tr.checkpoints) == 3
    sysm, k, t = Y.read_checkpoint(tr.checkpoints[-1])
    assert k == 6 and t == pytest.approx(0.06)
    np.testing.assert_array_equal(sysm.weights, tr.weights[-1])
    (tmp_path / "junk").write_bytes(b"xxxx" + bytes(40))
    with pytest.raises(ValueError):
        Y.read_checkpoint(tmp_path / "junk")


def test_metrics_csv_full_precision(tmp_path):
    assert Y.fmt(0.1) == "0.10000000000000001"
    assert Y.fmt(np.int64(3)) == "3"
    Y.write_metrics_csv(tmp_path / "m.csv", ("a", "b"), [(1, 0.1)])
    assert (tmp_path / "m.csv").read_text() == "a,b\n1,0.10000000000000001\n"
