"""Linearized objects along trajectories: Hessians, stability matrices, residuals.

Everything here is read-only over stored snapshots.  Closed forms need Gaussian
covariates and Hermite links; finite-difference and Monte-Carlo variants exist
as oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._rng import make_rng
from .data import BooleanFn, teacher_atoms
from .dynamics import (Kernels, closed_form_parts, drift_field, population_velocities, velocity_raw)
from .kernels import LinkFunction, pair_kernel_dsigma
from .particles import ParticleSystem
from .reduced import ensemble_from_system, reduced_velocity

FD_STEP = 1e-5


# ---------------------------------------------------------------- geometry

def projector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.eye(w.size) - np.outer(w, w)


def tangent_basis(w) -> np.ndarray:
    """Orthonormal d x (d-1) basis of the tangent space at unit w."""
    w = np.asarray(w, dtype=np.float64)
    _, _, vt = np.linalg.svd(w[None, :])
    return vt[1:].T


def _teachers(target, what="alignment"):
    if isinstance(target, BooleanFn):
        raise ValueError(f"{what} needs an atomic target, got a Boolean function")
    T, _ = target.atoms()
    return T


def _sign_symmetric(target) -> bool:
    link = getattr(target, "link", None)
    return bool(getattr(link, "parity_even", False))


def alignment(w, target) -> float:
    """Largest |w . w*| over teacher atoms."""
    T = _teachers(target)
    return float(np.max(np.abs(T @ np.asarray(w, dtype=np.float64))))


def teacher_distance(w, target) -> float:
    T = _teachers(target, "in_ball")
    z = T @ np.asarray(w, dtype=np.float64)
    # an even link cannot tell w* from -w*, so both count as the teacher
    z = np.abs(z) if _sign_symmetric(target) else z
    return float(math.sqrt(max(2.0 - 2.0 * float(np.max(z)), 0.0)))


def in_ball(w, target, tau: float) -> bool:
    return teacher_distance(w, target) <= tau


def _distances(W, target):
    T = _teachers(target, "in_ball")
    Z = W @ T.T
    Z = np.abs(Z) if _sign_symmetric(target) else Z
    return np.sqrt(np.maximum(2.0 - 2.0 * Z.max(axis=1), 0.0))


# ---------------------------------------------------------------- Hessians

@dataclass
class HessianBlock:
    matrix: np.ndarray
    anchor: int | None = None
    step: int | None = None


def _second(c: np.ndarray) -> np.ndarray:
    return c[1:] * np.arange(1, len(c)) if len(c) > 1 else np.zeros(1)


def _local_parts(Wq, P, bP, T, a, K: Kernels):
    """(g, G) per query row: the drift and its Euclidean Jacobian."""
    g = drift_field(Wq, P, bP, T, a, K)
    G = (_accel.pair_hess_field(Wq, T, a, _second(K.dst))
         - _accel.pair_hess_field(Wq, P, bP, _second(K.dss)) / P.shape[0])
    return g, G


def local_hessians(Wq, system: ParticleSystem, target, act, bq=None) -> np.ndarray:
    """D(w) = b_w (-(w.g) I - w g^T + P_w G) P_w for every row of Wq, shape (k, d, d)."""
    T, a, K = closed_form_parts(target, act)
    Wq = np.atleast_2d(np.asarray(Wq, dtype=np.float64))
    g, G = _local_parts(Wq, system.weights, system.b, T, a, K)
    k, d = Wq.shape
    out = np.empty((k, d, d))
    eye = np.eye(d)
    for i in range(k):
        w = Wq[i]
        Pw = eye - np.outer(w, w)
        A = -(w @ g[i]) * eye - np.outer(w, g[i]) + Pw @ G[i]
        out[i] = A @ Pw
    if bq is not None:
        out *= np.asarray(bq, dtype=np.float64)[:, None, None]
    return out


def local_hessian(w, system: ParticleSystem, target, act, mode: str = "analytic",
                  b_w: float = 1.0, h: float = FD_STEP) -> HessianBlock:
    """Derivative of the test-particle velocity at w, right-projected to the tangent space."""
    w = np.asarray(w, dtype=np.float64)
    if mode == "analytic":
        return HessianBlock(local_hessians(w[None, :], system, target, act, bq=[b_w])[0])
    if mode != "fd":
        raise ValueError("mode must be 'analytic' or 'fd'")
    T, a, K = closed_form_parts(target, act)
    Q = tangent_basis(w)
    plus = velocity_raw(w[None, :] + h * Q.T, system.weights, system.b, T, a, K)
    minus = velocity_raw(w[None, :] - h * Q.T, system.weights, system.b, T, a, K)
    cols = (plus - minus).T / (2.0 * h)
    return HessianBlock(b_w * cols @ Q.T)


def top_tangent_eigenvalue(D: np.ndarray, w) -> float:
    """Largest eigenvalue of D restricted to the tangent space at w.

    D = A P with P A P symmetric, so the restriction is symmetrized before eigvalsh.
    """
    Q = tangent_basis(w)
    S = Q.T @ D @ Q
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])


def _kernel_derivs(act):
    if not isinstance(act, LinkFunction):
        raise ValueError("closed-form interaction Hessian needs a Hermite link; use mode='mc'")
    q1 = pair_kernel_dsigma(act).array
    return q1, _second(q1)


def interaction_hessian(w, w2, act, mode: str = "closed", dist=None, n_mc: int = 200_000, seed: int = 0):
    """P_w (q''(w.w') w' w^T + q'(w.w') I) P_w'.

    mode="mc" averages phi_x(w) phi_x(w')^T with phi_x(w) = P_w sigma'(w.x) x and
    returns (matrix, elementwise stderr).
    """
    w = np.asarray(w, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if mode == "closed":
        q1, q2 = _kernel_derivs(act)
        z = float(w @ w2)
        M = float(_accel.poly_eval(q2, np.array([z]))[0]) * np.outer(w2, w) \
            + float(_accel.poly_eval(q1, np.array([z]))[0]) * np.eye(w.size)
        return HessianBlock(projector(w) @ M @ projector(w2))
    if mode != "mc":
        raise ValueError("mode must be 'closed' or 'mc'")
    if dist is None:
        raise ValueError("mc mode needs a covariate distribution")
    d = w.size
    s1 = np.zeros((d, d))
    s2 = np.zeros((d, d))
    done, shard = 0, 0
    while done < n_mc:
        k = min(1 << 15, n_mc - done)
        X = dist.sample(k, make_rng(seed, "mc_hess", shard))
        A = act(X @ w, 1)[:, None] * X
        B = act(X @ w2, 1)[:, None] * X
        A -= np.outer(A @ w, w)
        B -= np.outer(B @ w2, w2)
        s1 += A.T @ B
        s2 += (A * A).T @ (B * B)
        done += k
        shard += 1
    mean = s1 / n_mc
    var = np.maximum(s2 / n_mc - mean * mean, 0.0)
    return HessianBlock(mean), np.sqrt(var / max(n_mc - 1, 1))


def assemble_interaction(W, act, b=None) -> np.ndarray:
    """md x md matrix of blocks b_i b_j H(w_i, w_j)."""
    W = np.asarray(W, dtype=np.float64)
    m, d = W.shape
    b = np.ones(m) if b is None else np.asarray(b, dtype=np.float64)
    q1, q2 = _kernel_derivs(act)
    Z = W @ W.T
    Q1 = _accel.poly_eval(q1, Z)
    Q2 = _accel.poly_eval(q2, Z)
    P = np.eye(d)[None] - W[:, :, None] * W[:, None, :]
    out = np.empty((m * d, m * d))
    for i in range(m):
        for j in range(m):
            M = Q2[i, j] * np.outer(W[j], W[i]) + Q1[i, j] * np.eye(d)
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = b[i] * b[j] * (P[i] @ M @ P[j])
    return out


def interaction_apply(Wq, W, D, act, b=None) -> np.ndarray:
    """Row i: mean_j b_j H(Wq_i, W_j) D_j, without forming the blocks."""
    Wq = np.atleast_2d(np.asarray(Wq, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[0]
    b = np.ones(m) if b is None else np.asarray(b, dtype=np.float64)
    q1, q2 = _kernel_derivs(act)
    Dt = D - np.sum(W * D, axis=1, keepdims=True) * W          # P_{w_j} D_j
    Z = Wq @ W.T
    C2 = _accel.poly_eval(q2, Z) * b[None, :]
    C1 = _accel.poly_eval(q1, Z) * b[None, :]
    # the block q'' w_j w_i^T + q' I sends Dt_j to q'' (w_i . Dt_j) w_j + q' Dt_j
    wDt = Wq @ Dt.T
    out = (C2 * wDt) @ W + C1 @ Dt
    out -= np.sum(Wq * out, axis=1, keepdims=True) * Wq
    return out / m


# ---------------------------------------------------------------- stability matrices

@dataclass
class StabilityMatrix:
    matrix: np.ndarray
    s: int
    t: int
    particle: int | None


def _require_steps(traj, s, t):
    n = len(traj.weights)
    if n == 0:
        raise ValueError("trajectory has no stored snapshots")
    if list(traj.steps[:n]) != list(range(traj.steps[0], traj.steps[0] + n)):
        raise ValueError("stability matrices need snapshots at every step (record_every=1)")
    lo = traj.steps[0]
    if not (lo <= s <= t < lo + n):
        raise ValueError(f"times s={s}, t={t} outside the stored range [{lo}, {lo + n - 1}]")
    return lo


def stability_matrices(traj, problem, particles, s: int, ts) -> dict:
    """{t: (p, d, d)} matrix-Euler solutions J_{k+1} = J_k + eta D_k J_k from J_s = P."""
    particles = np.atleast_1d(np.asarray(particles, dtype=int))
    ts = sorted(set(int(t) for t in ts))
    lo = _require_steps(traj, s, ts[-1])
    b_all = traj.system_at(0).b
    W = traj.weights[s - lo][particles]
    d = W.shape[1]
    J = np.eye(d)[None] - W[:, :, None] * W[:, None, :]
    out = {}
    k = s
    for t in ts:
        if t < s:
            raise ValueError("t must be >= s")
        while k < t:
            sys_k = traj.system_at(k - lo)
            D = local_hessians(sys_k.weights[particles], sys_k, problem.target, problem.activation,
                               bq=b_all[particles])
            J = J + traj.eta * np.einsum("pij,pjk->pik", D, J)
            k += 1
        out[t] = J.copy()
    return out


def stability_matrix(traj, problem, particle: int, s: int, t: int) -> StabilityMatrix:
    J = stability_matrices(traj, problem, [particle], s, [t])[t][0]
    return StabilityMatrix(J, s, t, particle)


def flow_map(traj, problem, w, s: int, t: int, b_w: float = 1.0) -> np.ndarray:
    """Move a test point from step s to t through the stored measures."""
    lo = _require_steps(traj, s, t)
    T, a, K = closed_form_parts(problem.target, problem.activation)
    x = np.asarray(w, dtype=np.float64)[None, :].copy()
    for k in range(s, t):
        sys_k = traj.system_at(k - lo)
        v = velocity_raw(x, sys_k.weights, sys_k.b, T, a, K, bq=[b_w])
        x = x + traj.eta * v
        x /= np.linalg.norm(x)
    return x[0]


def stability_fd_check(traj, problem, particle: int, s: int, t: int, eps: float = 1e-5, seed: int = 0):
    """(fd column, J u, relative error) for a random tangent direction u."""
    lo = _require_steps(traj, s, t)
    w = traj.weights[s - lo][particle]
    b = traj.system_at(0).b[particle]
    u = make_rng(seed, "stab_fd").standard_normal(w.size)
    u -= (u @ w) * w
    u /= np.linalg.norm(u)
    J = stability_matrix(traj, problem, particle, s, t).matrix
    wp = (w + eps * u) / np.linalg.norm(w + eps * u)
    wm = (w - eps * u) / np.linalg.norm(w - eps * u)
    fd = (flow_map(traj, problem, wp, s, t, b) - flow_map(traj, problem, wm, s, t, b)) / (2 * eps)
    Ju = J @ u
    return fd, Ju, float(np.linalg.norm(fd - Ju) / max(np.linalg.norm(Ju), 1e-300))


@dataclass
class JMaxReport:
    value: float
    s: int
    t: int
    particle: int
    grid: list = field(default_factory=list)


def j_max_estimate(traj, problem, particles=None, s_grid=None, t_grid=None) -> JMaxReport:
    """Max spectral norm of J_{t,s} over an (s, t, particle) grid.

    Ties go to the earliest (s, t) and then the lowest particle index.
    """
    n = len(traj.weights)
    lo = _require_steps(traj, traj.steps[0], traj.steps[0])
    hi = lo + n - 1
    particles = np.arange(traj.weights[0].shape[0]) if particles is None else np.asarray(particles, dtype=int)
    s_grid = [lo] if s_grid is None else sorted(int(s) for s in s_grid)
    t_grid = list(range(lo, hi + 1, max(1, (hi - lo) // 16 or 1))) if t_grid is None else sorted(int(t) for t in t_grid)
    best = JMaxReport(-1.0, lo, lo, int(particles[0]))
    for s in s_grid:
        ts = [t for t in t_grid if t >= s] or [s]
        for t, J in stability_matrices(traj, problem, particles, s, ts).items():
            norms = np.linalg.norm(J, ord=2, axis=(1, 2))
            best.grid.append((s, t, float(norms.max())))
            i = int(np.argmax(norms))
            if norms[i] > best.value:
                best.value, best.s, best.t, best.particle = float(norms[i]), s, t, int(particles[i])
    return best


@dataclass
class JAvgReport:
    value: float
    argmax: tuple
    samples: list = field(default_factory=list)


def j_avg_estimate(traj, problem, tau: float, n_pairs: int = 32, n_wv: int = 16, n_particles: int = 64,
                   seed: int = 0) -> JAvgReport:
    """Sampled sup over (s, t, w', v) of mean_w |J_{t,s}(w) H_s(w, w') v| 1(w_t outside B_tau).

    A lower estimate of the true supremum, not a certificate.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    _teachers(problem.target, "j_avg_estimate")
    n = len(traj.weights)
    lo = _require_steps(traj, traj.steps[0], traj.steps[0])
    if tau >= 2.0:
        return JAvgReport(0.0, (lo, lo, None))
    rng = make_rng(seed, "j_avg")
    m = traj.weights[0].shape[0]
    parts = np.sort(rng.choice(m, size=min(n_particles, m), replace=False))
    pairs = set()
    for _ in range(n_pairs):
        s, t = sorted(int(x) for x in rng.integers(0, n, size=2))
        pairs.add((lo + s, lo + t))
    by_s = {}
    for s, t in sorted(pairs):
        by_s.setdefault(s, []).append(t)
    b = traj.system_at(0).b
    best = JAvgReport(-1.0, None)
    for s, ts in by_s.items():
        Js = stability_matrices(traj, problem, parts, s, ts)
        Ws = traj.weights[s - lo]
        draws = [(int(rng.integers(0, m)), rng.standard_normal(Ws.shape[1])) for _ in range(n_wv)]
        for t in ts:
            outside = _distances(traj.weights[t - lo][parts], problem.target) > tau
            for j, v in draws:
                v = v / np.linalg.norm(v)
                Hv = b[parts, None] * interaction_apply(Ws[parts], Ws[j:j + 1], v[None, :],
                                                        problem.activation, b[j:j + 1])
                val = float(np.mean(np.linalg.norm(np.einsum("pij,pj->pi", Js[t], Hv), axis=1) * outside))
                best.samples.append((s, t, j, val))
                if val > best.value:
                    best.value, best.argmax = val, (s, t, j)
    return best


# ---------------------------------------------------------------- error dynamics

@dataclass
class CoupledSnapshots:
    """Consecutive positions of an m-system and its width-M reference, plus the velocities used."""

    eta: float
    steps: list
    small: list
    large: list
    b_small: np.ndarray
    b_large: np.ndarray
    vel_small: list = field(default_factory=list)
    mode: str = "population"


@dataclass
class DuhamelReport:
    steps: list
    residual: np.ndarray
    eps_m: np.ndarray
    eps_n: np.ndarray
    delta_norm: np.ndarray
    bound: np.ndarray
    creg_link: float
    creg_fit: float
    rate_eps_m: float
    rate_eps_n: float

    def rows(self):
        for k, s in enumerate(self.steps):
            yield (s, float(self.residual[k].mean()), float(self.residual[k].max()), float(self.eps_m[k].mean()),
                   float(self.eps_n[k].mean()), float(self.delta_norm[k].mean()), float(self.bound[k].max()))


def _linear_error_term(Wref, bref, delta, large: ParticleSystem, target, act):
    """b_i [D(w_i; rho^M) Delta_i - mean_j b_j H(w_i, w_j) Delta_j] with w_i the reference positions."""
    D = local_hessians(Wref, large, target, act, bq=bref)
    out = np.einsum("pij,pj->pi", D, delta)
    out -= bref[:, None] * interaction_apply(Wref, Wref, delta, act, bref)
    return out


def duhamel_residual(snaps: CoupledSnapshots, problem, n_train: int | None = None, horizon: float | None = None,
                     creg: float | None = None) -> DuhamelReport:
    """Finite-difference error dynamics minus their linearization, per neuron and step."""
    if len(snaps.small) < 2 or len(snaps.small) != len(snaps.large):
        raise ValueError("duhamel_residual needs at least two consecutive coupled snapshots")
    T, a, K = closed_form_parts(problem.target, problem.activation)
    m, d = snaps.small[0].shape
    bm = snaps.b_small
    bref = snaps.b_large[:m]
    creg_link = problem.activation.creg_estimate() if creg is None else creg
    res, em, en, dn, bd = [], [], [], [], []
    for k in range(len(snaps.small) - 1):
        if snaps.steps[k + 1] != snaps.steps[k] + 1:
            raise ValueError("snapshots must be consecutive steps")
        Wm, WM = snaps.small[k], snaps.large[k]
        delta = Wm - WM[:m]
        fd = ((snaps.small[k + 1] - snaps.large[k + 1][:m]) - delta) / snaps.eta
        large = ParticleSystem(WM, snaps.b_large)
        lin = _linear_error_term(WM[:m], bref, delta, large, problem.target, problem.activation)
        r = np.linalg.norm(fd - lin, axis=1)
        v_full = velocity_raw(WM[:m], WM, snaps.b_large, T, a, K, bq=bref)
        v_pref = velocity_raw(WM[:m], WM[:m], bref, T, a, K, bq=bref)
        e_m = np.linalg.norm(v_pref - v_full, axis=1)
        if snaps.mode == "empirical" and snaps.vel_small:
            v_pop = velocity_raw(Wm, Wm, bm, T, a, K, bq=bm)
            e_n = np.linalg.norm(snaps.vel_small[k] - v_pop, axis=1)
        else:
            e_n = np.zeros(m)
        dsq = np.sum(delta * delta, axis=1)
        res.append(r)
        em.append(e_m)
        en.append(e_n)
        dn.append(np.sqrt(dsq))
        bd.append(2 * e_m + e_n + 2 * creg_link * (dsq + dsq.mean()))
    res, em, en, dn, bd = (np.array(x) for x in (res, em, en, dn, bd))
    quad = 2 * (dn ** 2 + np.mean(dn ** 2, axis=1, keepdims=True))
    excess = np.maximum(res - 2 * em - en, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fit = np.where(quad > 0, excess / np.where(quad > 0, quad, 1.0), 0.0)
    tmax = horizon if horizon is not None else snaps.eta * max(snaps.steps[-1], 1)
    rate_m = d ** 1.5 * math.log(max(m * tmax, 2.0)) / math.sqrt(m)
    rate_n = math.sqrt(d) * math.log(n_train) ** 2 / math.sqrt(n_train) if n_train else 0.0
    return DuhamelReport(list(snaps.steps[:-1]), res, em, en, dn, bd, creg_link, float(fit.max()), rate_m, rate_n)


def _normalize_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def residual_response(Wref, bref, delta, large: ParticleSystem, problem, c: float) -> np.ndarray:
    """nu(w_i + c Delta_i; rho-hat_c) - nu(w_i; rho^M) - c * linear term, per neuron."""
    T, a, K = closed_form_parts(problem.target, problem.activation)
    Wc = _normalize_rows(Wref + c * delta)
    v_c = velocity_raw(Wc, Wc, bref, T, a, K, bq=bref)
    v_ref = velocity_raw(Wref, large.weights, large.b, T, a, K, bq=bref)
    lin = _linear_error_term(Wref, bref, delta, large, problem.target, problem.activation)
    return v_c - v_ref - c * lin


def quadratic_component(Wref, bref, delta, large, problem, c: float) -> np.ndarray:
    """Even part (r(c) + r(-c))/2 - r(0) of the residual response: pure second order and up.

    Linear terms (including the O(eps_m) gap between the prefix and full measures
    inside D) cancel exactly.
    """
    r0 = residual_response(Wref, bref, delta, large, problem, 0.0)
    rp = residual_response(Wref, bref, delta, large, problem, c)
    rm = residual_response(Wref, bref, delta, large, problem, -c)
    return 0.5 * (rp + rm) - r0


def quadratic_scaling_ratio(snaps: CoupledSnapshots, problem, index: int, factor: float = 2.0) -> float:
    """|quadratic component at factor * Delta| / |quadratic component at Delta|, summed over neurons."""
    m = snaps.small[index].shape[0]
    WM = snaps.large[index]
    delta = snaps.small[index] - WM[:m]
    large = ParticleSystem(WM, snaps.b_large)
    q1 = quadratic_component(WM[:m], snaps.b_large[:m], delta, large, problem, 1.0)
    q2 = quadratic_component(WM[:m], snaps.b_large[:m], delta, large, problem, factor)
    return float(np.linalg.norm(q2, axis=1).sum() / np.linalg.norm(q1, axis=1).sum())


# ---------------------------------------------------------------- self-concordance

@dataclass
class ConcordanceReport:
    rows: list
    max_ratio: float
    violations: int
    checked: int


def self_concordance_series(traj, problem, record_indices=None, n_particles: int = 64, seed: int = 0,
                            band=None, factor: float = 3.0) -> ConcordanceReport:
    """lambda_max(D) against (k*-1) v(alpha)/alpha for sampled neurons in an alignment band.

    Rows are (step, particle, alpha, lambda_max, (k*-1) v(alpha)/alpha).
    """
    T, _, tlink = teacher_atoms(problem.target)
    if T.shape[0] != 1:
        raise ValueError("self-concordance check is for single-index targets")
    wstar = T[0]
    act = problem.activation
    kstar = act.info_exponent
    d = problem.d
    band = (2.0 / math.sqrt(d), 0.8) if band is None else band
    idx = range(len(traj.weights)) if record_indices is None else record_indices
    m = traj.weights[0].shape[0]
    parts = np.sort(make_rng(seed, "concordance").choice(m, size=min(n_particles, m), replace=False))
    rows = []
    ratio, bad, checked = -math.inf, 0, 0
    for k in idx:
        sys_k = traj.system_at(k)
        ens = ensemble_from_system(sys_k.weights, wstar, d)
        Wp = sys_k.weights[parts]
        al = np.abs(Wp @ wstar)
        keep = (al >= band[0]) & (al <= band[1])
        if not np.any(keep):
            continue
        D = local_hessians(Wp[keep], sys_k, problem.target, act, bq=sys_k.b[parts][keep])
        for p, a_, Dp, w in zip(parts[keep], al[keep], D, Wp[keep]):
            lam = top_tangent_eigenvalue(Dp, w)
            ref = (kstar - 1) * reduced_velocity(float(a_), ens, act) / a_
            rows.append((traj.steps[k], int(p), float(a_), lam, float(ref)))
            checked += 1
            if lam > factor * ref:
                bad += 1
            if ref > 0:
                ratio = max(ratio, lam / ref)
    return ConcordanceReport(rows, ratio, bad, checked)
