"""Hot kernels with a numba path and a plain numpy fallback.

Backend selection happens once at import time:

    POC_LAB_BACKEND=numba   (default when numba imports)
    POC_LAB_BACKEND=numpy   (pure numpy, no compilation)

POC_LAB_THREADS caps the numba thread pool.  Every reduction below runs over
fixed row blocks in a fixed order, so the result does not depend on how many
threads execute the blocks.
"""
import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

BLOCK = 256
ROUND_TOL = 1e-12

_requested = os.environ.get("POC_LAB_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"POC_LAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numpy"
if _requested == "numba":
    try:
        import numba
        from numba import njit, prange

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        BACKEND = "numpy"

if BACKEND == "numba":
    _threads = os.environ.get("POC_LAB_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------- numpy path

def _np_poly_eval(coeffs, z):
    z = np.asarray(z, dtype=np.float64)
    out = np.full(z.shape, coeffs[-1], dtype=np.float64)
    for c in coeffs[-2::-1]:
        out *= z
        out += c
    return out


def _np_poly_eval2(ca, cb, z):
    return _np_poly_eval(ca, z), _np_poly_eval(cb, z)


def _np_softplus2(z, temp):
    tz = temp * np.asarray(z, dtype=np.float64)
    sp = np.logaddexp(0.0, tz) / temp
    sg = 0.5 * (1.0 + np.tanh(0.5 * tz))
    return sp, sg


def _np_pair_field(W, P, bP, qc):
    m = W.shape[0]
    out = np.empty_like(W)
    PB = P * bP[:, None]
    for lo in range(0, m, BLOCK):
        G = W[lo:lo + BLOCK] @ P.T
        out[lo:lo + BLOCK] = _np_poly_eval(qc, G) @ PB
    return out


def _np_pair_sum(W, bW, P, bP, qc):
    m = W.shape[0]
    nblk = (m + BLOCK - 1) // BLOCK
    partial = np.zeros(nblk)
    for k in range(nblk):
        lo = k * BLOCK
        G = W[lo:lo + BLOCK] @ P.T
        partial[k] = bW[lo:lo + BLOCK] @ (_np_poly_eval(qc, G) @ bP)
    total = 0.0
    for k in range(nblk):
        total += partial[k]
    return total


def _np_pair_hess_field(W, P, bP, qc):
    m, d = W.shape
    out = np.empty((m, d, d))
    for lo in range(0, m, BLOCK):
        Q = _np_poly_eval(qc, W[lo:lo + BLOCK] @ P.T) * bP[None, :]
        out[lo:lo + BLOCK] = np.einsum("ij,jk,jl->ikl", Q, P, P, optimize=True)
    return out


# ---------------------------------------------------------------- numba path

if BACKEND == "numba":

    @njit(cache=True)
    def _horner(c, z):
        acc = c[c.shape[0] - 1]
        for t in range(c.shape[0] - 2, -1, -1):
            acc = acc * z + c[t]
        return acc

    @njit(parallel=True, cache=True)
    def _nb_poly_eval_flat(c, z):
        out = np.empty_like(z)
        for i in prange(z.shape[0]):
            out[i] = _horner(c, z[i])
        return out

    @njit(parallel=True, cache=True)
    def _nb_poly_eval2_flat(ca, cb, z):
        a = np.empty_like(z)
        b = np.empty_like(z)
        for i in prange(z.shape[0]):
            a[i] = _horner(ca, z[i])
            b[i] = _horner(cb, z[i])
        return a, b

    @njit(parallel=True, cache=True)
    def _nb_softplus2_flat(z, temp):
        sp = np.empty_like(z)
        sg = np.empty_like(z)
        for i in prange(z.shape[0]):
            tz = temp * z[i]
            if tz > 0.0:
                sp[i] = (tz + np.log1p(np.exp(-tz))) / temp
            else:
                sp[i] = np.log1p(np.exp(tz)) / temp
            sg[i] = 0.5 * (1.0 + np.tanh(0.5 * tz))
        return sp, sg

    @njit(parallel=True, cache=True)
    def _nb_pair_field(W, P, bP, qc, bs):
        m, d = W.shape
        n = P.shape[0]
        PB = np.empty_like(P)
        for j in range(n):
            for k in range(d):
                PB[j, k] = P[j, k] * bP[j]
        PT = np.ascontiguousarray(P.T)
        out = np.empty((m, d))
        nblk = (m + bs - 1) // bs
        for blk in prange(nblk):
            lo = blk * bs
            hi = min(m, lo + bs)
            G = np.dot(W[lo:hi], PT)
            for i in range(hi - lo):
                for j in range(n):
                    G[i, j] = _horner(qc, G[i, j])
            out[lo:hi] = np.dot(G, PB)
        return out

    @njit(parallel=True, cache=True)
    def _nb_pair_sum(W, bW, P, bP, qc, bs):
        m = W.shape[0]
        n = P.shape[0]
        PT = np.ascontiguousarray(P.T)
        nblk = (m + bs - 1) // bs
        partial = np.zeros(nblk)
        for blk in prange(nblk):
            lo = blk * bs
            hi = min(m, lo + bs)
            G = np.dot(W[lo:hi], PT)
            s = 0.0
            for i in range(hi - lo):
                row = 0.0
                for j in range(n):
                    row += _horner(qc, G[i, j]) * bP[j]
                s += row * bW[lo + i]
            partial[blk] = s
        total = 0.0
        for blk in range(nblk):
            total += partial[blk]
        return total

    @njit(parallel=True, cache=True)
    def _nb_pair_hess_field(W, P, bP, qc):
        m, d = W.shape
        n = P.shape[0]
        PT = np.ascontiguousarray(P.T)
        out = np.empty((m, d, d))
        for i in prange(m):
            S = np.empty((d, n))
            for j in range(n):
                z = 0.0
                for k in range(d):
                    z += W[i, k] * P[j, k]
                c = _horner(qc, z) * bP[j]
                for k in range(d):
                    S[k, j] = PT[k, j] * c
            out[i] = np.dot(S, P)
        return out


def _f64c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def poly_eval(coeffs, z):
    """Evaluate sum_k coeffs[k] z**k elementwise."""
    coeffs = _f64c(coeffs)
    if BACKEND == "numba":
        z = np.asarray(z, dtype=np.float64)
        return _nb_poly_eval_flat(coeffs, _f64c(z).ravel()).reshape(z.shape)
    return _np_poly_eval(coeffs, z)


def poly_eval2(ca, cb, z):
    """Two polynomials at the same points in one pass."""
    ca, cb = _f64c(ca), _f64c(cb)
    if BACKEND == "numba":
        z = np.asarray(z, dtype=np.float64)
        a, b = _nb_poly_eval2_flat(ca, cb, _f64c(z).ravel())
        return a.reshape(z.shape), b.reshape(z.shape)
    return _np_poly_eval2(ca, cb, z)


def softplus2(z, temp):
    """(softplus_temp(z), its derivative) elementwise."""
    if BACKEND == "numba":
        z = np.asarray(z, dtype=np.float64)
        a, b = _nb_softplus2_flat(_f64c(z).ravel(), float(temp))
        return a.reshape(z.shape), b.reshape(z.shape)
    return _np_softplus2(z, temp)


def pair_field(W, P, bP, qc):
    """out[i] = sum_j bP[j] q(W[i].P[j]) P[j]."""
    W, P, bP, qc = _f64c(W), _f64c(P), _f64c(bP), _f64c(qc)
    if BACKEND == "numba":
        return _nb_pair_field(W, P, bP, qc, BLOCK)
    return _np_pair_field(W, P, bP, qc)


def pair_sum(W, bW, P, bP, qc):
    """sum_ij bW[i] bP[j] q(W[i].P[j])."""
    W, bW, P, bP, qc = _f64c(W), _f64c(bW), _f64c(P), _f64c(bP), _f64c(qc)
    if BACKEND == "numba":
        return float(_nb_pair_sum(W, bW, P, bP, qc, BLOCK))
    return float(_np_pair_sum(W, bW, P, bP, qc))


def pair_hess_field(W, P, bP, qc):
    """out[i] = sum_j bP[j] q(W[i].P[j]) P[j] P[j]^T, shape (m, d, d)."""
    W, P, bP, qc = _f64c(W), _f64c(P), _f64c(bP), _f64c(qc)
    if BACKEND == "numba":
        return _nb_pair_hess_field(W, P, bP, qc)
    return _np_pair_hess_field(W, P, bP, qc)


# ---------------------------------------------------------------- reduced alignment step

def _np_alpha_step(a, w, qd, eta, kmom):
    mom = np.empty(kmom + 1)
    p = np.ones_like(a)
    for k in range(kmom + 1):
        mom[k] = w @ p
        p = p * a
    c = qd * (1.0 - mom[1:len(qd) + 1])
    s = 1.0 - a * a
    v = s * _np_poly_eval(c, a)
    den = np.sqrt(1.0 + eta * eta * v * v / np.maximum(s, 1e-300))
    new = np.where(s > 0, (a + eta * v) / den, a)
    lo, hi = new < -ROUND_TOL, new > 1.0 + ROUND_TOL
    return np.clip(new, 0.0, 1.0), mom, int(lo.sum() + hi.sum())


if BACKEND == "numba":

    @njit(cache=True)
    def _nb_alpha_step(a, w, qd, eta, kmom):
        n = a.shape[0]
        mom = np.zeros(kmom + 1)
        for i in range(n):
            p = w[i]
            for k in range(kmom + 1):
                mom[k] += p
                p *= a[i]
        c = np.empty(qd.shape[0])
        for k in range(qd.shape[0]):
            c[k] = qd[k] * (1.0 - mom[k + 1])
        new = np.empty(n)
        clamps = 0
        for i in range(n):
            s = 1.0 - a[i] * a[i]
            if s <= 0.0:
                new[i] = a[i]
                continue
            v = s * _horner(c, a[i])
            x = (a[i] + eta * v) / np.sqrt(1.0 + eta * eta * v * v / s)
            # excursions of a few ulps are rounding, not overshoot
            if x < 0.0:
                if x < -ROUND_TOL:
                    clamps += 1
                x = 0.0
            elif x > 1.0:
                if x > 1.0 + ROUND_TOL:
                    clamps += 1
                x = 1.0
            new[i] = x
        return new, mom, clamps


def alpha_step(a, w, qd, eta, kmom):
    """One retracted Euler step of the alignment ensemble.

    Returns (new alphas, moments r_0..r_kmom of the *input* ensemble, clamp count).
    """
    a, w, qd = _f64c(a), _f64c(w), _f64c(qd)
    if BACKEND == "numba":
        return _nb_alpha_step(a, w, qd, float(eta), int(kmom))
    return _np_alpha_step(a, w, qd, eta, kmom)
