"""Spectral potential for atomic targets.

The limiting interaction operator only sees which teacher atom each particle
ends up at, so its nonzero eigenfunctions are constant on the particles of an
atom.  Writing V = span(teachers) and U for its orthogonal complement, every
block maps U to U as q'(s.t) I_U and V to V, so the operator splits into

  * a scalar atom kernel sqrt(p_s p_t) q'(s.t), tensored with the identity on U,
  * an (atoms * dim V)-sized matrix on V.

Eigenfunctions from the first part are stored as scalar tables (one number per
atom) and applied through the projector onto U, never as dense vectors.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._rng import make_rng
from .diagnostics import interaction_apply, local_hessians, tangent_basis
from .kernels import LinkFunction, pair_kernel_dsigma

CLUSTER_RTOL = 1e-8
RANK_TOL = 1e-10


@dataclass
class TeacherAssignment:
    index: np.ndarray
    distances: np.ndarray
    teachers: np.ndarray


def assign_xi_infinity(W, teachers) -> TeacherAssignment:
    """Nearest teacher (Euclidean) for every row of W; ties go to the lowest teacher index."""
    T = np.atleast_2d(np.asarray(teachers, dtype=np.float64))
    if T.size == 0 or T.shape[0] == 0:
        raise ValueError("empty teacher set")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    D = np.sqrt(np.maximum(np.sum(W * W, 1)[:, None] - 2 * W @ T.T + np.sum(T * T, 1)[None, :], 0.0))
    idx = np.argmin(D, axis=1)
    return TeacherAssignment(idx, D[np.arange(W.shape[0]), idx], T)


def limit_atoms(target) -> np.ndarray:
    """Teacher atoms, with -w* added for even target links (both are fixed points)."""
    T, _ = target.atoms()
    if getattr(getattr(target, "link", None), "parity_even", False):
        T = np.concatenate([T, -T])
    return T


def _kernels(act):
    if not isinstance(act, LinkFunction):
        raise ValueError("the limiting interaction operator needs a Hermite link")
    q1 = pair_kernel_dsigma(act).array
    q2 = q1[1:] * np.arange(1, len(q1)) if len(q1) > 1 else np.zeros(1)
    return q1, q2


def h_block(s, t, act) -> np.ndarray:
    """P_s (q''(s.t) t s^T + q'(s.t) I) P_t for unit vectors s, t."""
    q1, q2 = _kernels(act)
    z = float(s @ t)
    d = s.size
    Ps = np.eye(d) - np.outer(s, s)
    Pt = np.eye(d) - np.outer(t, t)
    M = float(_accel.poly_eval(q2, np.array([z]))[0]) * np.outer(t, s) \
        + float(_accel.poly_eval(q1, np.array([z]))[0]) * np.eye(d)
    return Ps @ M @ Pt


def h_infinity_block(i: int, j: int, assignment: TeacherAssignment, act) -> np.ndarray:
    T = assignment.teachers
    return h_block(T[assignment.index[i]], T[assignment.index[j]], act)


# ---------------------------------------------------------------- decomposition

@dataclass
class Cluster:
    eigenvalue: float
    u_tables: np.ndarray   # (atoms, kU): per-atom scalar y/sqrt(p), paired with the U identity
    v_tables: np.ndarray   # (atoms, r, kV): per-atom V coordinates x/sqrt(p)
    eta: float = 0.0

    @property
    def n_u(self):
        return self.u_tables.shape[1]

    @property
    def n_v(self):
        return self.v_tables.shape[2]


@dataclass
class SpectralDecomposition:
    teachers: np.ndarray          # occupied atoms only
    occupancy: np.ndarray
    atom_of: np.ndarray           # particle -> row of ``teachers``
    basis_v: np.ndarray           # d x r
    clusters: list
    empty_atoms: list = field(default_factory=list)

    @property
    def d(self):
        return self.teachers.shape[1]

    @property
    def m(self):
        return self.atom_of.size

    @property
    def dim_u(self):
        return self.d - self.basis_v.shape[1]

    @property
    def balance(self) -> float:
        return float(sum(c.eta ** 2 for c in self.clusters))

    @property
    def c_rho(self) -> int:
        return int(self.teachers.shape[0])

    @property
    def p_min(self) -> float:
        return float(self.occupancy.min())

    @property
    def balance_bound(self) -> float:
        return 2.0 * self.c_rho / self.p_min

    def project_u(self, X):
        B = self.basis_v
        return X - (X @ B) @ B.T

    def frame(self, cluster: Cluster, atom: int) -> np.ndarray:
        """sum_v v(w) v(w)^T for a particle at ``atom`` (dense d x d)."""
        B = self.basis_v
        su = float(np.sum(cluster.u_tables[atom] ** 2))
        X = cluster.v_tables[atom]
        return su * (np.eye(self.d) - B @ B.T) + B @ (X @ X.T) @ B.T

    def dense_functions(self, cluster: Cluster) -> np.ndarray:
        """(atoms, d, n_functions) explicit eigenfunction values; small d only."""
        B = self.basis_v
        cols = []
        if cluster.n_u and self.dim_u:
            Ub = np.linalg.svd(np.eye(self.d) - B @ B.T)[0][:, :self.dim_u]
            for k in range(cluster.n_u):
                for e in Ub.T:
                    cols.append(cluster.u_tables[:, k][:, None] * e[None, :])
        for k in range(cluster.n_v):
            cols.append(cluster.v_tables[:, :, k] @ B.T)
        if not cols:
            return np.zeros((self.teachers.shape[0], self.d, 0))
        return np.stack(cols, axis=2)

    def to_json(self) -> str:
        return json.dumps({
            "teachers": self.teachers.tolist(), "occupancy": self.occupancy.tolist(),
            "basis_v": self.basis_v.tolist(), "empty_atoms": self.empty_atoms,
            "balance": self.balance, "balance_bound": self.balance_bound, "c_rho": self.c_rho,
            "clusters": [{"eigenvalue": c.eigenvalue, "eta": c.eta, "u_tables": c.u_tables.tolist(),
                          "v_tables": c.v_tables.tolist()} for c in self.clusters]}, indent=2)

    @classmethod
    def from_json(cls, text: str, atom_of) -> "SpectralDecomposition":
        o = json.loads(text)
        d = len(o["teachers"][0])
        r = len(o["basis_v"][0]) if o["basis_v"] and o["basis_v"][0] else 0
        nt = len(o["teachers"])
        cl = [Cluster(c["eigenvalue"], np.asarray(c["u_tables"], dtype=np.float64).reshape(nt, -1),
                      np.asarray(c["v_tables"], dtype=np.float64).reshape(nt, r, -1), c["eta"])
              for c in o["clusters"]]
        return cls(np.asarray(o["teachers"]), np.asarray(o["occupancy"]), np.asarray(atom_of),
                   np.asarray(o["basis_v"]).reshape(d, r), cl, o["empty_atoms"])


def _group(vals, rtol):
    order = np.argsort(-vals, kind="stable")
    scale = max(float(np.max(np.abs(vals))), 1e-300) if len(vals) else 1.0
    groups = []
    for k in order:
        if groups and abs(vals[k] - vals[groups[-1][0]]) <= rtol * scale:
            groups[-1].append(k)
        else:
            groups.append([k])
    return groups, scale


def spectral_decompose(assignment: TeacherAssignment, act, rtol: float = CLUSTER_RTOL) -> SpectralDecomposition:
    """Eigen-decompose the limiting operator under the empirical measure of the assignment."""
    T_all = assignment.teachers
    counts = np.bincount(assignment.index, minlength=T_all.shape[0])
    occupied = np.nonzero(counts)[0]
    empty = [int(k) for k in np.nonzero(counts == 0)[0]]
    remap = -np.ones(T_all.shape[0], dtype=int)
    remap[occupied] = np.arange(occupied.size)
    T = T_all[occupied]
    p = counts[occupied] / counts.sum()
    nt, d = T.shape
    sq = np.sqrt(p)
    q1, _ = _kernels(act)

    u, sv, _ = np.linalg.svd(T.T, full_matrices=False)
    B = u[:, sv > RANK_TOL * max(sv.max(), 1.0)]
    r = B.shape[1]
    dim_u = d - r

    eig_vals, tags = [], []
    if dim_u > 0:
        M1 = sq[:, None] * _accel.poly_eval(q1, T @ T.T) * sq[None, :]
        mu, Y = np.linalg.eigh(0.5 * (M1 + M1.T))
        for k in range(nt):
            eig_vals.append(mu[k])
            tags.append(("U", Y[:, k] / sq))
    KV = np.zeros((nt * r, nt * r))
    for s in range(nt):
        for t in range(nt):
            KV[s * r:(s + 1) * r, t * r:(t + 1) * r] = sq[s] * sq[t] * (B.T @ h_block(T[s], T[t], act) @ B)
    if r > 0:
        lam, X = np.linalg.eigh(0.5 * (KV + KV.T))
        for k in range(nt * r):
            eig_vals.append(lam[k])
            tags.append(("V", X[:, k].reshape(nt, r) / sq[:, None]))
    vals = np.asarray(eig_vals)
    groups, scale = _group(vals, rtol)
    clusters = []
    for g in groups:
        lam = float(np.mean(vals[g]))
        if abs(lam) <= rtol * scale:
            continue
        us = [tags[k][1] for k in g if tags[k][0] == "U"]
        vs = [tags[k][1] for k in g if tags[k][0] == "V"]
        ut = np.stack(us, axis=1) if us else np.zeros((nt, 0))
        vt = np.stack(vs, axis=2) if vs else np.zeros((nt, r, 0))
        clusters.append(Cluster(lam, ut, vt))
    bsd = SpectralDecomposition(T, p, remap[assignment.index], B, clusters, empty)
    for c in clusters:
        c.eta = math.sqrt(max(np.linalg.norm(bsd.frame(c, s), 2) for s in range(nt)))
    return bsd


def reconstruction_error(bsd: SpectralDecomposition, act, pairs=None) -> float:
    """max |H_inf(s, t) - sum_lambda lambda sum_v v_s v_t^T| over atom pairs."""
    nt = bsd.teachers.shape[0]
    dense = [(c.eigenvalue, bsd.dense_functions(c)) for c in bsd.clusters]
    pairs = [(s, t) for s in range(nt) for t in range(nt)] if pairs is None else pairs
    err = 0.0
    for s, t in pairs:
        R = sum(lam * F[s] @ F[t].T for lam, F in dense) if dense else 0.0
        err = max(err, float(np.max(np.abs(h_block(bsd.teachers[s], bsd.teachers[t], act) - R))))
    return err


def orthonormality_error(bsd: SpectralDecomposition) -> float:
    """max |<v, v'> - delta| under the empirical inner product, across all clusters."""
    F = np.concatenate([bsd.dense_functions(c) for c in bsd.clusters], axis=2)
    G = np.einsum("s,sdk,sdl->kl", bsd.occupancy, F, F)
    return float(np.max(np.abs(G - np.eye(G.shape[0]))))


# ---------------------------------------------------------------- potential

def _cluster_coeffs(bsd: SpectralDecomposition, c: Cluster, delta):
    """Signed phi values for the cluster: (P_U z_k for U tables, scalars for V tables)."""
    m = delta.shape[0]
    a = bsd.atom_of
    zu = bsd.project_u((c.u_tables[a].T @ delta) / m) if c.n_u else np.zeros((0, bsd.d))
    # V eigenfunction value at particle i: B x_k[a_i]
    coords = delta @ bsd.basis_v
    zv = np.einsum("ir,irk->k", coords, c.v_tables[a]) / m if c.n_v else np.zeros(0)
    return zu, zv


def potential_value(delta, bsd: SpectralDecomposition):
    """(Phi, Omega, Psi) with Omega = mean |Delta(i)| and Psi the spectrally weighted part."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (bsd.m, bsd.d):
        raise ValueError(f"delta has shape {delta.shape}, expected {(bsd.m, bsd.d)}")
    omega = float(np.mean(np.linalg.norm(delta, axis=1)))
    psi = 0.0
    for c in bsd.clusters:
        zu, zv = _cluster_coeffs(bsd, c, delta)
        psi += c.eta * math.sqrt(float(np.sum(zu * zu) + np.sum(zv * zv)))
    return omega + psi, omega, psi


@dataclass
class Gradient:
    omega: np.ndarray
    psi: np.ndarray
    zero_rows: list
    zero_clusters: list

    @property
    def total(self):
        return self.omega + self.psi


def potential_gradient(delta, bsd: SpectralDecomposition) -> Gradient:
    """Per-particle gradient of Phi scaled by m, so <grad, G> = mean_i grad_i . G(i).

    Rows with Delta(i) = 0 and clusters with all phi_v = 0 take the zero subgradient
    and are listed.
    """
    delta = np.asarray(delta, dtype=np.float64)
    n = np.linalg.norm(delta, axis=1)
    zero_rows = [int(i) for i in np.nonzero(n == 0)[0]]
    g_om = np.where(n[:, None] > 0, delta / np.where(n > 0, n, 1.0)[:, None], 0.0)
    g_psi = np.zeros_like(delta)
    zero_cl = []
    a = bsd.atom_of
    B = bsd.basis_v
    for k, c in enumerate(bsd.clusters):
        zu, zv = _cluster_coeffs(bsd, c, delta)
        nrm = math.sqrt(float(np.sum(zu * zu) + np.sum(zv * zv)))
        if nrm == 0:
            zero_cl.append(k)
            continue
        part = np.zeros_like(delta)
        if c.n_u:
            part += c.u_tables[a] @ zu
        if c.n_v:
            part += np.einsum("irk,k->ir", c.v_tables[a], zv) @ B.T
        g_psi += (c.eta / nrm) * part
    return Gradient(g_om, g_psi, zero_rows, zero_cl)


def pairing(grad: np.ndarray, G: np.ndarray) -> float:
    return float(np.mean(np.sum(grad * G, axis=1)))


# ---------------------------------------------------------------- lemma checks

def perturbation_check(bsd: SpectralDecomposition, delta, n_trials: int = 100, seed: int = 0) -> dict:
    """|<grad Phi, G>| <= (1 + C_b) mean |G(i)| for random unit G(i); exact inequality."""
    grad = potential_gradient(delta, bsd).total
    rng = make_rng(seed, "l1_perturbation")
    worst, passed = 0.0, 0
    for _ in range(n_trials):
        G = rng.standard_normal(delta.shape)
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        lhs = abs(pairing(grad, G))
        rhs = (1.0 + bsd.balance) * float(np.mean(np.linalg.norm(G, axis=1)))
        passed += lhs <= rhs
        worst = max(worst, lhs / rhs)
    return {"trials": n_trials, "passed": int(passed), "worst_ratio": worst, "ok": passed == n_trials}


def _ball_mask(W, teachers, tau):
    d = np.sqrt(np.maximum(2.0 - 2.0 * (W @ teachers.T), 0.0)).min(axis=1)
    return d <= tau


def structured_lsc_fit(W, D, bsd: SpectralDecomposition, mask) -> dict:
    """Least-squares (c1, c2) with -D ~ c1 VV^T P_xi VV^T + c2 UU^T over ball particles."""
    B = bsd.basis_v
    VV = B @ B.T
    UU = np.eye(bsd.d) - VV
    rows_a, rows_b, rhs = [], [], []
    for i in np.nonzero(mask)[0]:
        xi = bsd.teachers[bsd.atom_of[i]]
        A = VV @ (np.eye(bsd.d) - np.outer(xi, xi)) @ VV
        rows_a.append(A.ravel())
        rows_b.append(UU.ravel())
        rhs.append(-D[i].ravel())
    if not rhs:
        return {"c1": float("nan"), "c2": float("nan"), "residual": float("nan"), "n": 0}
    Amat = np.stack([np.concatenate(rows_a), np.concatenate(rows_b)], axis=1)
    y = np.concatenate(rhs)
    coef, *_ = np.linalg.lstsq(Amat, y, rcond=None)
    res = (Amat @ coef - y).reshape(-1, bsd.d, bsd.d)
    return {"c1": float(coef[0]), "c2": float(coef[1]),
            "residual": float(max(np.linalg.norm(R, 2) for R in res)), "n": int(mask.sum())}


def lemma_checks(W_t, delta, bsd: SpectralDecomposition, tau: float, problem, reference, eps_m: float = 0.0,
                 n_trials: int = 100, seed: int = 0) -> dict:
    """Both sides of the interaction-descent, local-descent and L1-perturbation inequalities.

    W_t are the reference positions of the m coupled neurons at time t; ``reference``
    is the full reference ParticleSystem used for the local Hessians.
    """
    W_t = np.asarray(W_t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    act = problem.activation
    b = reference.b[:W_t.shape[0]]
    grad = potential_gradient(delta, bsd)
    g = grad.total
    phi, omega, _ = potential_value(delta, bsd)
    out_ball = ~_ball_mask(W_t, bsd.teachers, tau)
    dnorm = np.linalg.norm(delta, axis=1)
    ex_delta = float(np.mean(dnorm * out_ball))
    cb = bsd.balance

    HD = b[:, None] * interaction_apply(W_t, W_t, delta, act, b)
    lhs_a = pairing(g, -HD)
    main_a = (1.0 + cb) * float(np.mean(np.linalg.norm(HD, axis=1) * out_ball))
    den_a = ex_delta + (tau + cb * eps_m) * omega
    fit_a = max(0.0, lhs_a - main_a) / den_a if den_a > 0 else (0.0 if lhs_a <= main_a else math.inf)

    D = local_hessians(W_t, reference, problem.target, act, bq=b)
    lhs_b = pairing(g, np.einsum("pij,pj->pi", D, delta))
    inside = ~out_ball
    lam = [float(np.linalg.eigvalsh(0.5 * (Q.T @ D[i] @ Q + (Q.T @ D[i] @ Q).T))[-1])
           for i in np.nonzero(inside)[0] for Q in [tangent_basis(W_t[i])]]
    margin = -max(lam) if lam else float("nan")
    rest_b = lhs_b + 0.5 * margin * phi - cb * float(np.mean(dnorm ** 2))
    den_b = tau * phi + ex_delta
    fit_b = max(0.0, rest_b) / den_b if den_b > 0 else (0.0 if rest_b <= 0 else math.inf)

    return {
        "balance": cb, "phi": phi, "omega": omega, "tau": tau,
        "fraction_outside_ball": float(out_ball.mean()),
        "interaction": {"lhs": lhs_a, "main_rhs": main_a, "exclusion_terms": den_a, "fitted_C": fit_a,
                        "ok_without_exclusion": bool(lhs_a <= main_a)},
        "local": {"lhs": lhs_b, "lsc_margin": margin, "fitted_C": fit_b, "negative": bool(lhs_b < 0),
                  "structured_fit": structured_lsc_fit(W_t, D, bsd, inside)},
        "perturbation": perturbation_check(bsd, delta, n_trials, seed),
        "zero_subgradient_rows": grad.zero_rows, "zero_subgradient_clusters": grad.zero_clusters,
    }


def restricted_isometry_check(bsd: SpectralDecomposition, mask, act) -> float:
    """max over eigenfunctions of |mean_j H_inf(i,j) v(j) 1_B(j) - lambda v(i) P[B]| / (|lambda| |v|)."""
    mask = np.asarray(mask, dtype=bool)
    nt = bsd.teachers.shape[0]
    frac = np.array([np.mean(mask[bsd.atom_of == s]) if np.any(bsd.atom_of == s) else 0.0 for s in range(nt)])
    pB = float(mask.mean())
    Hst = [[h_block(bsd.teachers[s], bsd.teachers[t], act) for t in range(nt)] for s in range(nt)]
    worst = 0.0
    for c in bsd.clusters:
        F = bsd.dense_functions(c)
        for k in range(F.shape[2]):
            v = F[:, :, k]
            scale = abs(c.eigenvalue) * max(float(np.max(np.linalg.norm(v, axis=1))), 1e-300)
            for s in range(nt):
                act_v = sum(bsd.occupancy[t] * frac[t] * Hst[s][t] @ v[t] for t in range(nt))
                worst = max(worst, float(np.linalg.norm(act_v - c.eigenvalue * v[s] * pB)) / scale)
    return worst
