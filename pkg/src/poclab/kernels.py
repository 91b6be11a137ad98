"""Activations in the Hermite basis and their Gaussian pair kernels.

For x ~ N(0, I) and unit vectors w, v with z = w.v,

    E sigma(w.x) sigma(v.x)   = q_sigma(z)  = sum_k k! c_k^2 z^k
    E sigma'(w.x) sigma'(v.x) = q_dsigma(z) = sum_k (k+1)(k+1)! c_{k+1}^2 z^k

and q_dsigma is the formal derivative of q_sigma.  Activations without a
Hermite expansion (SoftPlus) go through :func:`mc_pair_expectation`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._rng import make_rng

MAX_HERMITE_K = 64
MAX_LINK_DEGREE = 20
MC_SHARD = 1 << 16


def hermite_eval(k: int, z):
    """Probabilists' Hermite polynomial He_k(z) by the three-term recurrence."""
    if not isinstance(k, (int, np.integer)) or k < 0 or k > MAX_HERMITE_K:
        raise ValueError(f"Hermite degree must be an integer in [0, {MAX_HERMITE_K}], got {k!r}")
    z = np.asarray(z, dtype=np.float64)
    prev = np.ones_like(z)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = z.copy()
    for j in range(1, k):
        prev, cur = cur, z * cur - j * prev
    return cur if cur.ndim else float(cur)


def hermite_monomials(k: int) -> np.ndarray:
    """Monomial coefficients (ascending powers) of He_k."""
    if k < 0 or k > MAX_HERMITE_K:
        raise ValueError(f"Hermite degree out of range: {k}")
    prev = np.zeros(k + 1)
    prev[0] = 1.0
    if k == 0:
        return prev
    cur = np.zeros(k + 1)
    cur[1] = 1.0
    for j in range(1, k):
        nxt = np.zeros(k + 1)
        nxt[1:] = cur[:-1]
        nxt -= j * prev
        prev, cur = cur, nxt
    return cur


def _poly_derivative(c: np.ndarray) -> np.ndarray:
    if len(c) <= 1:
        return np.zeros(1)
    return c[1:] * np.arange(1, len(c))


@dataclass(frozen=True)
class PairKernel:
    """Polynomial q(z) = sum_k coeffs[k] z^k on [-1, 1]."""

    coeffs: tuple

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 1 or len(c) == 0 or not np.all(np.isfinite(c)):
            raise ValueError("pair kernel coefficients must be a nonempty finite vector")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=np.float64)

    def __call__(self, z):
        out = _accel.poly_eval(self.array, z)
        return out if np.ndim(z) else float(out)

    def derivative(self) -> "PairKernel":
        return PairKernel(tuple(_poly_derivative(self.array)))


@dataclass(frozen=True)
class LinkFunction:
    """sigma(z) = sum_k c_k He_k(z) with c_0..c_K real."""

    coeffs: tuple
    parity_even: bool | None = None
    _mono: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("link needs at least one Hermite coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("link coefficients must be finite")
        nz = np.nonzero(c)[0]
        if len(nz) == 0:
            raise ValueError("link with all-zero Hermite coefficients")
        c = c[: nz[-1] + 1]
        if len(c) - 1 > MAX_LINK_DEGREE:
            raise ValueError(f"link degree {len(c) - 1} exceeds cap {MAX_LINK_DEGREE}")
        odd_nonzero = bool(np.any(c[1::2] != 0))
        if self.parity_even is None:
            object.__setattr__(self, "parity_even", not odd_nonzero)
        elif self.parity_even and odd_nonzero:
            raise ValueError("parity_even link has a nonzero odd coefficient")
        object.__setattr__(self, "coeffs", tuple(float(x) for x in c))
        mono = np.zeros(len(c))
        for k, ck in enumerate(c):
            if ck:
                mono[: k + 1] += ck * hermite_monomials(k)
        object.__setattr__(self, "_mono", mono)

    @property
    def info_exponent(self) -> int:
        return int(np.nonzero(self.coeffs)[0][0])

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def has_closed_form(self) -> bool:
        return True

    def monomials(self, order: int = 0) -> np.ndarray:
        c = self._mono
        for _ in range(order):
            c = _poly_derivative(c)
        return c

    def __call__(self, z, order: int = 0):
        return _accel.poly_eval(self.monomials(order), z)

    def value_and_slope(self, z):
        return _accel.poly_eval2(self._mono, self.monomials(1), z)

    def to_config(self) -> dict:
        return {"hermite": list(self.coeffs)}

    def creg_estimate(self) -> float:
        return _creg_from(lambda z, j: self(z, j))


@dataclass(frozen=True)
class SoftPlus:
    """softplus_temp(z) = log(1 + exp(temp z)) / temp; no Hermite closed form."""

    temp: float = 16.0
    parity_even = False

    def __post_init__(self):
        if not (self.temp > 0 and math.isfinite(self.temp)):
            raise ValueError("softplus temperature must be positive")

    @property
    def has_closed_form(self) -> bool:
        return False

    def __call__(self, z, order: int = 0):
        z = np.asarray(z, dtype=np.float64)
        sp, sg = _accel.softplus2(z, self.temp)
        if order == 0:
            return sp
        if order == 1:
            return sg
        t = self.temp
        if order == 2:
            return t * sg * (1 - sg)
        if order == 3:
            return t * t * sg * (1 - sg) * (1 - 2 * sg)
        raise ValueError("softplus derivatives implemented up to order 3")

    def value_and_slope(self, z):
        return _accel.softplus2(z, self.temp)

    def to_config(self) -> dict:
        return {"softplus": {"temp": self.temp}}

    def creg_estimate(self) -> float:
        return _creg_from(lambda z, j: self(z, j))


def _creg_from(deriv) -> float:
    # 11 * max_j (E|sigma^(j)(X)|^5)^(1/5), X ~ N(0,1), j = 0..3, by Gauss-Hermite quadrature
    x, wq = np.polynomial.hermite_e.hermegauss(160)
    wq = wq / wq.sum()
    best = 0.0
    for j in range(4):
        m5 = float(wq @ np.abs(deriv(x, j)) ** 5)
        best = max(best, m5 ** 0.2)
    return 11.0 * best


def link_from_config(cfg) -> LinkFunction | SoftPlus:
    if isinstance(cfg, (LinkFunction, SoftPlus)):
        return cfg
    if not isinstance(cfg, dict) or len(cfg) != 1:
        raise ValueError(f"link config must be {{'hermite': [...]}} or {{'softplus': {{...}}}}, got {cfg!r}")
    if "hermite" in cfg:
        return LinkFunction(tuple(cfg["hermite"]))
    if "softplus" in cfg:
        return SoftPlus(float(dict(cfg["softplus"]).get("temp", 16.0)))
    raise ValueError(f"unknown link kind {next(iter(cfg))!r}")


def pair_kernel_sigma(link: LinkFunction) -> PairKernel:
    c = np.asarray(link.coeffs)
    k = np.arange(len(c))
    fact = np.array([math.factorial(j) for j in k], dtype=np.float64)
    return PairKernel(tuple(fact * c ** 2))


def pair_kernel_dsigma(link: LinkFunction) -> PairKernel:
    c = np.asarray(link.coeffs)
    if len(c) == 1:
        return PairKernel((0.0,))
    k = np.arange(len(c) - 1)
    fact = np.array([math.factorial(j + 1) for j in k], dtype=np.float64)
    # (k+1) * [(k+1)! c_{k+1}^2], the same float operations as differentiating q_sigma
    return PairKernel(tuple((fact * c[1:] ** 2) * (k + 1)))


def pair_kernel_ddsigma(link: LinkFunction) -> PairKernel:
    return pair_kernel_dsigma(link).derivative()


def cross_pair_kernel(student: LinkFunction, teacher: LinkFunction) -> PairKernel:
    """E sigma_s(w.x) sigma_t(v.x) = sum_k k! c^s_k c^t_k z^k; equals q_sigma when the links agree."""
    a = np.asarray(student.coeffs)
    b = np.asarray(teacher.coeffs)
    n = min(len(a), len(b))
    fact = np.array([math.factorial(j) for j in range(n)], dtype=np.float64)
    c = fact * a[:n] * b[:n]
    return PairKernel(tuple(c) if n else (0.0,))


def derivative_identity_gap(link: LinkFunction) -> float:
    """Max coefficient gap between d/dz q_sigma and q_dsigma (zero for every link)."""
    a = pair_kernel_sigma(link).derivative().array
    b = pair_kernel_dsigma(link).array
    n = max(len(a), len(b))
    a = np.pad(a, (0, n - len(a)))
    b = np.pad(b, (0, n - len(b)))
    return float(np.max(np.abs(a - b)))


_VARIANTS = {"sigma": (0, 0), "dsigma": (1, 1), "mixed": (0, 1)}


def mc_pair_expectation(act, dist, w, v, n_mc: int, seed: int, variant: str = "sigma"):
    """Monte-Carlo E[s(w.x) t(v.x)] over x ~ dist, with its standard error.

    ``variant`` picks (s, t): "sigma" -> (sigma, sigma), "dsigma" -> (sigma', sigma'),
    "mixed" -> (sigma, sigma').  Even links are sampled in antithetic pairs (x, -x);
    the standard error is then computed over pair means.  Samples are drawn in
    fixed shards, each with its own counter-based stream.
    """
    if not hasattr(dist, "sample") or not hasattr(dist, "d"):
        raise ValueError(f"invalid covariate distribution {dist!r}")
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {sorted(_VARIANTS)}")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for u in (w, v):
        if u.shape != (dist.d,):
            raise ValueError("vector dimension does not match the distribution")
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("w and v must be unit vectors")
    oa, ob = _VARIANTS[variant]
    antithetic = bool(getattr(act, "parity_even", False)) and n_mc >= 2
    n_draw = n_mc // 2 if antithetic else n_mc

    total = 0.0
    total_sq = 0.0
    done = 0
    shard = 0
    while done < n_draw:
        k = min(MC_SHARD, n_draw - done)
        x = dist.sample(k, make_rng(seed, "mc_pair", shard))
        a, b = x @ w, x @ v
        vals = act(a, oa) * act(b, ob)
        if antithetic:
            vals = 0.5 * (vals + act(-a, oa) * act(-b, ob))
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
        done += k
        shard += 1
    mean = total / n_draw
    var = max(total_sq / n_draw - mean * mean, 0.0)
    stderr = math.sqrt(var / max(n_draw - 1, 1))
    return mean, stderr
