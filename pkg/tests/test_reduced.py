import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poclab import reduced as R
from poclab.kernels import LinkFunction

HE4 = R.hermite_link(4)


def test_hermite_link():
    assert HE4 == LinkFunction((0, 0, 0, 0, 1.0))
    assert R.hermite_link(3).info_exponent == 3


@pytest.mark.parametrize("d", [8, 32])
def test_quantile_ensemble_moments(d):
    # E alpha^2 = 1/d and E alpha^4 = 3/(d(d+2)) for one coordinate of a uniform unit vector
    ens = R.ensemble_quantiles(d, 4096)
    assert ens.r(0) == pytest.approx(1.0)
    assert ens.r(2) == pytest.approx(1 / d, rel=1e-3)
    assert ens.r(4) == pytest.approx(3 / (d * (d + 2)), rel=1e-2)
    assert np.all(np.diff(ens.alphas) > 0)


def test_sphere_ensemble_agrees_with_quantiles():
    a = R.ensemble_from_sphere(16, 200_000, 0)
    assert a.r(2) == pytest.approx(1 / 16, rel=1e-2)
    b = R.ensemble_from_system(np.eye(3), np.eye(3)[0])
    assert b.alphas.tolist() == [1.0, 0.0, 0.0] and b.d == 3


def test_ensemble_validation():
    with pytest.raises(ValueError):
        R.AlphaEnsemble(np.array([]), np.array([]), 4)
    with pytest.raises(ValueError):
        R.AlphaEnsemble(np.array([0.5, 1.2]), np.array([0.5, 0.5]), 4)
    with pytest.raises(ValueError):
        R.AlphaEnsemble(np.array([0.5, 0.2]), np.array([0.6, 0.6]), 4)
    with pytest.raises(ValueError):
        R.AlphaEnsemble(np.array([0.5]), np.array([0.5, 0.5]), 4)


def test_velocity_by_hand_for_he4():
    # q_dsigma = 96 z^3, so v(a) = 96 a^3 (1 - a^2) (1 - r_4)
    ens = R.ensemble_quantiles(16, 64)
    for a in (0.0, 0.2, 0.9, 1.0):
        assert R.reduced_velocity(a, ens, HE4) == pytest.approx(96 * a ** 3 * (1 - a * a) * (1 - ens.r(4)))
    arr = R.reduced_velocity(np.array([0.2, 0.9]), ens, HE4)
    assert arr.shape == (2,)


def test_polynomial_velocity_approaches_sphere_average():
    gaps = []
    for d in (16, 64, 256):
        ens = R.ensemble_quantiles(d, 256)
        p = R.reduced_velocity(0.7, ens, HE4)
        m, se = R.reduced_velocity(0.7, ens, HE4, "montecarlo", n_mc=200_000, seed=1)
        gaps.append(abs(p - m) / abs(p))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 2e-4


def test_velocity_validation():
    ens = R.ensemble_quantiles(8, 16)
    with pytest.raises(ValueError):
        R.reduced_velocity(1.5, ens, HE4)
    with pytest.raises(ValueError):
        R.reduced_velocity(0.5, ens, HE4, mode="exact")


def test_dvelocity_matches_fd():
    ens = R.ensemble_quantiles(12, 64)
    link = LinkFunction((0, 0, 0.5, 0, 1.0, 0, 0.3))
    h = 1e-6
    for a in (0.1, 0.5, 0.8):
        fd = (R.reduced_velocity(a + h, ens, link) - R.reduced_velocity(a - h, ens, link)) / (2 * h)
        assert R.reduced_dvelocity(a, ens, link) == pytest.approx(fd, rel=1e-7)


def test_loss_proxy():
    ens = R.AlphaEnsemble(np.ones(3), np.full(3, 1 / 3), 5)
    assert R.loss_proxy(ens, HE4) == 0.0
    ens0 = R.AlphaEnsemble(np.zeros(3), np.full(3, 1 / 3), 5)
    assert R.loss_proxy(ens0, HE4) == 24.0


@given(st.floats(0, 1), st.floats(-50, 50), st.floats(0, 1))
def test_retraction_matches_plane_geometry(a, v, eta):
    s = 1 - a * a
    got = R.retract_alpha(a, v, eta)
    if s <= 0:
        assert got == a
        return
    w = np.array([a, math.sqrt(s)])
    t = np.array([math.sqrt(s), -a])  # unit tangent with positive teacher component
    x = w + eta * (v / math.sqrt(s)) * t
    assert got == pytest.approx(x[0] / np.linalg.norm(x), abs=1e-12)
    assert abs(got) <= 1 + 1e-12


def _scalar_reduced(qd, qs, alphas, eta, delta, max_steps):
    """Plain-Python loop of the moment-coupled alignment flow; returns (T, losses)."""
    n = len(alphas)
    a = list(alphas)
    losses = []
    for k in range(max_steps + 1):
        kmax = max(len(qs), len(qd) + 1)
        r = [sum(x ** j for x in a) / n for j in range(kmax + 1)]
        L = sum(qs[j] * (1 - r[j]) ** 2 for j in range(len(qs)))
        losses.append(L)
        if L <= delta * delta:
            return k * eta, losses
        new = []
        for x in a:
            s = 1 - x * x
            v = s * sum(qd[j] * (1 - r[j + 1]) * x ** j for j in range(len(qd)))
            new.append(min(max(R.retract_alpha(x, v, eta), 0.0), 1.0))
        a = new
    return None, losses


def test_run_reduced_against_scalar_loop():
    d, n, eta, delta = 6, 16, 0.02, 0.5
    ens = R.ensemble_quantiles(d, n)
    qd = [0, 0, 0, 96.0]
    qs = [0, 0, 0, 0, 24.0]
    T, losses = _scalar_reduced(qd, qs, ens.alphas.tolist(), eta, delta, 20_000)
    run = R.run_reduced(HE4, d, ens, eta, delta, max_steps=20_000, record_every=50)
    assert T is not None and run.T_delta == pytest.approx(T, abs=1e-9)
    np.testing.assert_allclose(run.loss, losses, rtol=1e-10, atol=1e-12)
    assert run.clamp_events == 0
    assert np.all(np.diff(run.loss) <= 1e-12)


def test_run_reduced_records_and_stops():
    ens = R.ensemble_quantiles(8, 64)
    run = R.run_reduced(HE4, 8, ens, 0.01, 0.3, record_every=100)
    last = len(run.loss) - 1
    assert last in run.snapshots and 0 in run.snapshots
    assert run.loss[last] <= 0.09 < run.loss[last - 1]
    rows = list(run.rows(4))
    assert rows[0][3] == pytest.approx(ens.r(4))
    cap = R.run_reduced(HE4, 8, ens, 0.01, 0.3, max_steps=10)
    assert cap.T_delta is None and len(cap.loss) == 11
    with pytest.raises(ValueError):
        R.run_reduced(HE4, 8, ens, 0.01, 1.0)


def test_escape_times_and_spread():
    rows = R.escape_time_table([8, 16], 4, 0.3, n_quantiles=128)
    assert [r[0] for r in rows] == [8, 16]
    assert rows[1][3] > rows[0][3] > 0
    run = R.run_reduced(HE4, 8, R.ensemble_quantiles(8, 128), 0.01, 0.3)
    sp = R.escape_spread(run)
    assert sp["spread"] >= 0 and sp["ratio"] == pytest.approx(sp["spread"] / run.T_delta)
    never = R.run_reduced(HE4, 8, R.ensemble_quantiles(8, 8), 0.01, 0.3, max_steps=1)
    assert math.isnan(R.escape_spread(never)["spread"])


def test_ell_ts_identity_and_growth():
    run = R.run_reduced(HE4, 8, R.ensemble_quantiles(8, 64), 0.01, 0.3, record_every=10)
    ell, a = R.ell_ts(run, HE4, 5, 5, 0.4)
    assert (ell, a) == (1.0, 0.4)
    # v' = 96 (1 - r_4)(3 a^2 - 5 a^4): expanding at small alignment, contracting near 1
    ell, a = R.ell_ts(run, HE4, 0, 5, 0.1)
    assert ell > 1 and a > 0.1
    assert R.ell_ts(run, HE4, 0, 5, 0.95)[0] < 1
    with pytest.raises(ValueError):
        R.ell_ts(run, HE4, 3, 2, 0.4)


def test_dispersion_property():
    ens = R.AlphaEnsemble(np.array([0.0, 0.05, 0.5, 1.0]), np.full(4, 0.25), 4)
    assert R.check_star(ens, 0.2) == (False, 0.25)
    assert R.check_star(ens, 0.3)[0]
    assert R.largest_passing_iota(ens, [0.1, 0.3, 0.4]) == 0.4
    assert R.largest_passing_iota(ens, [0.1]) is None
    with pytest.raises(ValueError):
        R.check_star(ens, 0.5)
