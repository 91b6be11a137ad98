"""Single-index dynamics reduced to the alignment distribution.

For a single teacher w* and an even link, the mean-field state is summarized by
the law of alpha = |w.w*|.  Each alpha particle moves with

    v(alpha) = sum_k q_k alpha^k (1 - alpha^2) (1 - r_{k+1}),   r_k = E alpha^k,

where q_k are the coefficients of q_dsigma, and the loss is approximated by
sum_k qs_k (1 - r_k)^2 with qs_k the coefficients of q_sigma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _accel
from ._rng import make_rng
from .kernels import LinkFunction, pair_kernel_dsigma, pair_kernel_sigma

QUANTILE_POINTS = 1024


@dataclass
class AlphaEnsemble:
    alphas: np.ndarray
    weights: np.ndarray
    d: int
    kmax: int = 24
    moments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if a.size == 0:
            raise ValueError("empty alpha ensemble")
        if a.shape != w.shape:
            raise ValueError("one weight per alpha")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("alphas must lie in [0, 1]")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        self.alphas, self.weights = a, w
        self.moments = _moments(a, w, self.kmax)

    def r(self, k: int) -> float:
        return float(self.moments[k])

    def with_alphas(self, alphas) -> "AlphaEnsemble":
        return AlphaEnsemble(alphas, self.weights, self.d, self.kmax)


def _moments(a, w, kmax):
    out = np.empty(kmax + 1)
    p = np.ones_like(a)
    for k in range(kmax + 1):
        out[k] = w @ p
        p = p * a
    return out


def ensemble_from_sphere(d: int, n: int, seed: int) -> AlphaEnsemble:
    """alpha = |first coordinate| of n uniform points on S^{d-1}."""
    g = make_rng(seed, "alpha_init").standard_normal((n, d))
    a = np.abs(g[:, 0]) / np.linalg.norm(g, axis=1)
    return AlphaEnsemble(np.minimum(a, 1.0), np.full(n, 1.0 / n), d)


def ensemble_quantiles(d: int, n: int = QUANTILE_POINTS) -> AlphaEnsemble:
    """Deterministic ensemble at midpoint quantiles of |w_1|, w uniform on S^{d-1}.

    alpha^2 follows Beta(1/2, (d-1)/2).
    """
    u = (np.arange(n) + 0.5) / n
    a = np.sqrt(stats.beta.ppf(u, 0.5, 0.5 * (d - 1)))
    return AlphaEnsemble(a, np.full(n, 1.0 / n), d)


def ensemble_from_system(weights, w_star, d=None) -> AlphaEnsemble:
    a = np.minimum(np.abs(np.asarray(weights) @ w_star), 1.0)
    return AlphaEnsemble(a, np.full(a.size, 1.0 / a.size), d or len(w_star))


def _velocity_coeffs(qd, moments):
    # v(alpha) = (1 - alpha^2) sum_k qd_k (1 - r_{k+1}) alpha^k
    k = np.arange(len(qd))
    return qd * (1.0 - moments[k + 1])


def _times_one_minus_sq(c):
    out = np.zeros(len(c) + 2)
    out[: len(c)] += c
    out[2:] -= c
    return out


def velocity_polynomial(link: LinkFunction, moments) -> np.ndarray:
    """Monomial coefficients of the polynomial-mode v(alpha) for frozen moments."""
    qd = pair_kernel_dsigma(link).array
    return _times_one_minus_sq(_velocity_coeffs(qd, moments))


def reduced_velocity(alpha, ens: AlphaEnsemble, link: LinkFunction, mode: str = "polynomial",
                     n_mc: int = 200_000, seed: int = 0):
    """Alignment velocity of a particle at alpha.

    "polynomial" returns the leading-order expression (a float or array).
    "montecarlo" averages the full sphere expectation over partner alignments
    drawn from the ensemble and a uniform orthogonal component, returning
    (mean, stderr).
    """
    if len(ens.alphas) == 0:
        raise ValueError("empty ensemble")
    if np.any(np.asarray(alpha) < 0) or np.any(np.asarray(alpha) > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if mode == "polynomial":
        out = _accel.poly_eval(velocity_polynomial(link, ens.moments), alpha)
        return out if np.ndim(alpha) else float(out)
    if mode != "montecarlo":
        raise ValueError("mode must be 'polynomial' or 'montecarlo'")
    a = float(alpha)
    qd = pair_kernel_dsigma(link).array
    rng = make_rng(seed, "reduced_mc")
    ap = rng.choice(ens.alphas, size=n_mc, p=ens.weights)
    g = rng.standard_normal((n_mc, ens.d - 1))
    u = g[:, 0] / np.linalg.norm(g, axis=1)
    yw = math.sqrt(max(1 - a * a, 0.0)) * np.sqrt(np.maximum(1 - ap * ap, 0.0)) * u
    inter = _accel.poly_eval(qd, a * ap + yw) * (ap * (1 - a * a) - a * yw)
    self_term = float(_accel.poly_eval(qd, np.array([a]))[0]) * (1 - a * a)
    mean = self_term - float(inter.mean())
    stderr = float(inter.std(ddof=1) / math.sqrt(n_mc))
    return mean, stderr


def reduced_dvelocity(alpha, ens: AlphaEnsemble, link: LinkFunction):
    """d/dalpha of the polynomial-mode velocity: sum_k q_k (1-r_{k+1}) (k a^{k-1} - (k+2) a^{k+1})."""
    c = velocity_polynomial(link, ens.moments)
    dc = c[1:] * np.arange(1, len(c))
    out = _accel.poly_eval(dc, alpha)
    return out if np.ndim(alpha) else float(out)


def loss_proxy(ens: AlphaEnsemble, link: LinkFunction) -> float:
    qs = pair_kernel_sigma(link).array
    k = np.arange(len(qs))
    return float(np.sum(qs * (1.0 - ens.moments[k]) ** 2))


@dataclass
class ReducedRun:
    eta: float
    d: int
    times: np.ndarray
    loss: np.ndarray
    moments: np.ndarray  # (n_steps+1, kmax+1): moments at every step
    snapshots: dict  # step -> alphas
    weights: np.ndarray
    T_delta: float | None
    clamp_events: int
    crossing_times: np.ndarray  # first time each particle reaches 0.5 (nan if never)

    def ensemble_at(self, k: int) -> AlphaEnsemble:
        return AlphaEnsemble(self.snapshots[k], self.weights, self.d)

    def rows(self, kstar: int, qs=(0.1, 0.5, 0.9)):
        for k in sorted(self.snapshots):
            a = self.snapshots[k]
            yield (k, k * self.eta, self.loss[k], self.moments[k, kstar],
                   *_weighted_quantiles(a, self.weights, qs))


def _weighted_quantiles(a, w, qs):
    order = np.argsort(a, kind="stable")
    cw = np.cumsum(w[order])
    return [float(a[order][min(np.searchsorted(cw, q), len(a) - 1)]) for q in qs]


def retract_alpha(a: float, v: float, eta: float) -> float:
    """Alignment after w <- (w + eta nu)/|w + eta nu| when nu lies in span(w, w*)."""
    s = 1.0 - a * a
    if s <= 0.0:
        return a
    return (a + eta * v) / math.sqrt(1.0 + eta * eta * v * v / s)


def run_reduced(link: LinkFunction, d: int, ens0: AlphaEnsemble, eta: float, delta: float,
                max_steps: int = 200_000, record_every: int = 10, stop_at_target: bool = True,
                min_steps: int = 0) -> ReducedRun:
    """Evolve every alpha particle with the polynomial-mode velocity.

    Each step is the Euler step of the sphere flow followed by the same
    retraction the full simulator applies, written in alignment coordinates;
    it cannot leave [0, 1], and the clamp counter records any rounding excursion.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    qd = pair_kernel_dsigma(link).array
    qs = pair_kernel_sigma(link).array
    kmom = max(len(qs) - 1, len(qd))
    w = ens0.weights
    a = ens0.alphas.copy()
    kq = np.arange(len(qs))
    loss, moms, snaps = [], [], {}
    cross = np.full(a.shape, np.nan)
    clamps = 0
    T = None
    target = delta * delta
    k = 0
    while True:
        new, mom, n_clamp = _accel.alpha_step(a, w, qd, eta, kmom)
        L = float(np.sum(qs * (1.0 - mom[kq]) ** 2))
        loss.append(L)
        moms.append(mom)
        newly = np.isnan(cross) & (a >= 0.5)
        cross[newly] = k * eta
        if k % record_every == 0:
            snaps[k] = a.copy()
        if T is None and L <= target:
            T = k * eta
        if (T is not None and stop_at_target and k >= min_steps) or k == max_steps:
            snaps[k] = a.copy()
            break
        clamps += n_clamp
        a = new
        k += 1
    n = len(loss)
    return ReducedRun(eta, d, np.arange(n) * eta, np.array(loss), np.array(moms), snaps, w, T, clamps, cross)


def ell_ts(run: ReducedRun, link: LinkFunction, s: int, t: int, alpha_s: float):
    """Integrate dl/dt = v'(alpha) l by Euler from step s to step t along a test alignment.

    The test particle starts at alpha_s and feels the recorded moments.  Returns
    (l_{t,s}, alpha_t).
    """
    if not (0 <= s <= t < len(run.loss)):
        raise ValueError("steps out of range")
    qd = pair_kernel_dsigma(link).array
    a, ell = float(alpha_s), 1.0
    for k in range(s, t):
        c = _times_one_minus_sq(_velocity_coeffs(qd, run.moments[k]))
        dc = c[1:] * np.arange(1, len(c))
        ell *= 1.0 + run.eta * float(np.polyval(dc[::-1], a))
        a = min(max(retract_alpha(a, float(np.polyval(c[::-1], a)), run.eta), 0.0), 1.0)
    return ell, a


def check_star(ens: AlphaEnsemble, iota: float):
    """(passes, mass) for the dispersion property P[alpha in [iota, 1 - iota]] <= iota."""
    if not 0 < iota < 0.5:
        raise ValueError("iota must lie in (0, 0.5)")
    inside = (ens.alphas >= iota) & (ens.alphas <= 1 - iota)
    mass = float(ens.weights[inside].sum())
    return mass <= iota, mass


def largest_passing_iota(ens: AlphaEnsemble, grid=None) -> float | None:
    grid = np.geomspace(1e-4, 0.49, 200) if grid is None else grid
    ok = [i for i in grid if check_star(ens, float(i))[0]]
    return float(max(ok)) if ok else None


def hermite_link(kstar: int) -> LinkFunction:
    c = [0.0] * kstar + [1.0]
    return LinkFunction(tuple(c))


def escape_time_table(ds, kstar: int, delta: float, eta: float = 0.01, n_quantiles: int = QUANTILE_POINTS,
                      max_steps: int = 2_000_000):
    """Rows (d, kstar, delta, T(delta)) from quantile-initialized reduced runs."""
    link = hermite_link(kstar)
    rows = []
    for d in ds:
        run = run_reduced(link, d, ensemble_quantiles(d, n_quantiles), eta, delta,
                          max_steps=max_steps, record_every=max_steps)
        rows.append((d, kstar, delta, run.T_delta if run.T_delta is not None else float("nan")))
    return rows


def escape_spread(run: ReducedRun) -> dict:
    """Spread of first-crossing times of alpha = 0.5 relative to T(delta)."""
    c = run.crossing_times[~np.isnan(run.crossing_times)]
    if c.size == 0 or not run.T_delta:
        return {"spread": float("nan"), "ratio": float("nan"), "non_uniform": False}
    spread = float(np.quantile(c, 0.9) - np.quantile(c, 0.1))
    ratio = spread / run.T_delta
    return {"spread": spread, "ratio": ratio, "non_uniform": ratio > 0.1}
