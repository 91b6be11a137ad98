import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import hermite_e as npherm

from poclab.data import GaussianIso
from poclab.kernels import (LinkFunction, PairKernel, SoftPlus, cross_pair_kernel, derivative_identity_gap,
                            hermite_eval, hermite_monomials, link_from_config, mc_pair_expectation,
                            pair_kernel_ddsigma, pair_kernel_dsigma, pair_kernel_sigma)

HE4 = LinkFunction((0, 0, 0, 0, 1.0))
MIS = LinkFunction((0, 0, 0, 0, 0.8, 0, 0.6))

coeff_lists = st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=7).filter(
    lambda c: any(abs(x) > 1e-3 for x in c))


def gauss_pair(f, g, z, n=40):
    """E f(x1) g(z x1 + sqrt(1-z^2) x2) by tensor Gauss-Hermite quadrature (exact for polynomials)."""
    x, w = npherm.hermegauss(n)
    w = w / w.sum()
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return float(np.sum(W * f(X1) * g(z * X1 + math.sqrt(1 - z * z) * X2)))


@pytest.mark.parametrize("k", range(13))
def test_hermite_eval_matches_numpy(k):
    z = np.linspace(-3, 3, 41)
    ref = npherm.hermeval(z, [0] * k + [1])
    np.testing.assert_allclose(hermite_eval(k, z), ref, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(hermite_monomials(k), npherm.herme2poly([0] * k + [1]), atol=1e-9)


def test_hermite_eval_rejects_bad_degree():
    with pytest.raises(ValueError):
        hermite_eval(-1, 0.3)
    with pytest.raises(ValueError):
        hermite_eval(65, 0.3)


def test_he4_kernels():
    assert pair_kernel_sigma(HE4).coeffs == (0, 0, 0, 0, 24.0)
    assert pair_kernel_dsigma(HE4).coeffs == (0, 0, 0, 96.0)
    assert pair_kernel_ddsigma(HE4).coeffs == (0, 0, 288.0)
    assert pair_kernel_sigma(HE4)(0.5) == 24 * 0.5 ** 4


def test_cross_kernel_misspecified():
    # student He4 + He6, teacher 0.8 He4 + 0.6 He6: 4! * 0.8 z^4 + 6! * 0.6 z^6
    q = cross_pair_kernel(LinkFunction((0, 0, 0, 0, 1.0, 0, 1.0)), MIS)
    np.testing.assert_allclose(q.array, [0, 0, 0, 0, 19.2, 0, 432.0])
    assert cross_pair_kernel(MIS, MIS).coeffs == pair_kernel_sigma(MIS).coeffs


@given(coeff_lists, st.floats(-0.99, 0.99))
def test_pair_kernels_against_quadrature(coeffs, z):
    link = LinkFunction(tuple(coeffs))
    scale = 1 + sum(math.factorial(k) * c * c for k, c in enumerate(coeffs))
    q = gauss_pair(lambda x: link(x), lambda x: link(x), z)
    assert pair_kernel_sigma(link)(z) == pytest.approx(q, abs=1e-9 * scale)
    qd = gauss_pair(lambda x: link(x, 1), lambda x: link(x, 1), z)
    assert pair_kernel_dsigma(link)(z) == pytest.approx(qd, abs=1e-9 * scale * 10)


@given(coeff_lists)
def test_derivative_identity_is_exact(coeffs):
    assert derivative_identity_gap(LinkFunction(tuple(coeffs))) == 0.0


@given(coeff_lists, st.floats(-1, 1))
def test_pair_kernel_bounded_by_diagonal(coeffs, z):
    q = pair_kernel_sigma(LinkFunction(tuple(coeffs)))
    assert abs(q(z)) <= q(1.0) * (1 + 1e-12)


def test_link_validation():
    with pytest.raises(ValueError):
        LinkFunction(())
    with pytest.raises(ValueError):
        LinkFunction((0.0, 0.0))
    with pytest.raises(ValueError):
        LinkFunction((0.0, float("nan")))
    with pytest.raises(ValueError):
        LinkFunction(tuple([0.0] * 21 + [1.0]))
    with pytest.raises(ValueError):
        LinkFunction((0, 1.0), parity_even=True)
    link = LinkFunction((0, 0, 1.0, 0, 0))
    assert link.coeffs == (0, 0, 1.0) and link.parity_even and link.info_exponent == 2 and link.degree == 2
    assert not LinkFunction((0, 1.0, 1.0)).parity_even


def test_link_from_config():
    assert link_from_config({"hermite": [0, 0, 0, 0, 1]}) == HE4
    assert link_from_config({"softplus": {"temp": 8}}) == SoftPlus(8.0)
    with pytest.raises(ValueError):
        link_from_config({"relu": {}})
    with pytest.raises(ValueError):
        link_from_config([1, 2])


def test_softplus_derivatives_match_fd():
    sp = SoftPlus(16.0)
    z = np.linspace(-0.5, 0.5, 11)
    h = 1e-6
    for order in range(3):
        fd = (sp(z + h, order) - sp(z - h, order)) / (2 * h)
        np.testing.assert_allclose(fd, sp(z, order + 1), rtol=1e-6, atol=1e-6)
    assert not sp.has_closed_form
    with pytest.raises(ValueError):
        SoftPlus(0.0)


def test_pair_kernel_rejects_bad_coeffs():
    with pytest.raises(ValueError):
        PairKernel(())
    with pytest.raises(ValueError):
        PairKernel((1.0, float("inf")))


def test_mc_pair_expectation_close_to_closed_form():
    dist = GaussianIso(3)
    w = np.array([1.0, 0, 0])
    v = np.array([0.6, 0.8, 0])
    mean, se = mc_pair_expectation(MIS, dist, w, v, 200_000, seed=4)
    assert abs(mean - pair_kernel_sigma(MIS)(0.6)) < 5 * se
    again = mc_pair_expectation(MIS, dist, w, v, 200_000, seed=4)
    assert again == (mean, se)


def test_mc_pair_expectation_validation():
    dist = GaussianIso(3)
    w = np.array([1.0, 0, 0])
    with pytest.raises(ValueError):
        mc_pair_expectation(HE4, dist, w, np.array([1.0, 1.0, 0]), 10, 0)
    with pytest.raises(ValueError):
        mc_pair_expectation(HE4, dist, w, np.array([1.0, 0]), 10, 0)
    with pytest.raises(ValueError):
        mc_pair_expectation(HE4, dist, w, w, 10, 0, variant="other")
    with pytest.raises(ValueError):
        mc_pair_expectation(HE4, dist, w, w, 0, 0)
    with pytest.raises(ValueError):
        mc_pair_expectation(HE4, object(), w, w, 10, 0)


def test_creg_estimate_positive_and_finite():
    for act in (HE4, MIS, SoftPlus(16.0)):
        c = act.creg_estimate()
        assert math.isfinite(c) and c > 0
