"""Covariates, targets and datasets; the problem settings used in the experiments."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .kernels import LinkFunction, SoftPlus, link_from_config
from .particles import ParticleSystem

DATASET_MAGIC = b"PCDS"
DATASET_VERSION = 1
CIRCLE_NODES = 256


# ---------------------------------------------------------------- covariates

@dataclass(frozen=True)
class GaussianIso:
    d: int
    kind = "gaussian"

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("dimension must be >= 2")

    def sample(self, n, rng):
        return rng.standard_normal((n, self.d))

    def to_config(self):
        return {"kind": "gaussian", "d": self.d}


@dataclass(frozen=True)
class RademacherCube:
    d: int
    kind = "rademacher"

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("dimension must be >= 2")

    def sample(self, n, rng):
        return rng.integers(0, 2, size=(n, self.d)).astype(np.float64) * 2.0 - 1.0

    def to_config(self):
        return {"kind": "rademacher", "d": self.d}


CovariateSpec = GaussianIso | RademacherCube


def covariates_from_config(cfg) -> CovariateSpec:
    kind = cfg.get("kind", "gaussian")
    if kind == "gaussian":
        return GaussianIso(int(cfg["d"]))
    if kind == "rademacher":
        return RademacherCube(int(cfg["d"]))
    raise ValueError(f"unknown covariate kind {kind!r}")


# ---------------------------------------------------------------- targets

def _unit_rows(a, what):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if np.max(np.abs(np.linalg.norm(a, axis=1) - 1.0)) > 1e-9:
        raise ValueError(f"{what} must be unit vectors")
    return a


@dataclass(frozen=True)
class AtomicTeachers:
    """f*(x) = sum_l a_l sigma(w*_l . x)."""

    teachers: np.ndarray
    weights: np.ndarray
    link: LinkFunction
    noise_std: float = 0.0

    def __post_init__(self):
        T = _unit_rows(self.teachers, "teacher vectors")
        a = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if a.shape[0] != T.shape[0]:
            raise ValueError("one weight per teacher")
        if abs(a.sum() - 1.0) > 1e-9:
            raise ValueError("teacher weights must sum to 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        object.__setattr__(self, "teachers", T)
        object.__setattr__(self, "weights", a)

    @property
    def d(self):
        return self.teachers.shape[1]

    def atoms(self):
        return self.teachers, self.weights

    def __call__(self, X):
        X = np.atleast_2d(X)
        return self.link(X @ self.teachers.T) @ self.weights

    def to_config(self):
        return {"kind": "atomic", "teachers": self.teachers.tolist(), "weights": self.weights.tolist(),
                "link": self.link.to_config(), "noise_std": self.noise_std}


@dataclass(frozen=True)
class SingleIndex:
    link: LinkFunction
    w_star: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        w = _unit_rows(self.w_star, "w_star")[0]
        object.__setattr__(self, "w_star", w)
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    @property
    def d(self):
        return self.w_star.shape[0]

    def atoms(self):
        return self.w_star[None, :], np.ones(1)

    def __call__(self, X):
        return self.link(np.atleast_2d(X) @ self.w_star)

    def to_config(self):
        return {"kind": "single_index", "w_star": self.w_star.tolist(),
                "link": self.link.to_config(), "noise_std": self.noise_std}


@dataclass(frozen=True)
class ManifoldCircle:
    """Uniform teacher mass on the unit circle of a 2-plane, integrated by equispaced nodes."""

    link: LinkFunction
    basis: np.ndarray
    n_nodes: int = CIRCLE_NODES
    noise_std: float = 0.0

    def __post_init__(self):
        B = np.asarray(self.basis, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != 2:
            raise ValueError("circle basis must be a (2, d) array")
        if np.max(np.abs(B @ B.T - np.eye(2))) > 1e-9:
            raise ValueError("circle basis must be orthonormal")
        object.__setattr__(self, "basis", B)

    @property
    def d(self):
        return self.basis.shape[1]

    def atoms(self):
        th = 2 * np.pi * np.arange(self.n_nodes) / self.n_nodes
        T = np.cos(th)[:, None] * self.basis[0] + np.sin(th)[:, None] * self.basis[1]
        T /= np.linalg.norm(T, axis=1, keepdims=True)
        return T, np.full(self.n_nodes, 1.0 / self.n_nodes)

    def __call__(self, X):
        T, a = self.atoms()
        return self.link(np.atleast_2d(X) @ T.T) @ a

    def to_config(self):
        return {"kind": "circle", "basis": self.basis.tolist(), "n_nodes": self.n_nodes,
                "link": self.link.to_config(), "noise_std": self.noise_std}


@dataclass(frozen=True)
class BooleanFn:
    """Parities and staircases on Boolean coordinates (0-based indices).

    XOR_k: prod_{i in S} x_i.  Staircase: sum_l weights[l] prod_{i in S[:stages[l]]} x_i.
    """

    kind: str
    index_set: tuple
    weights: tuple = (1.0,)
    stages: tuple = ()
    noise_std: float = 0.0

    def __post_init__(self):
        S = tuple(int(i) for i in self.index_set)
        if len(set(S)) != len(S) or len(S) == 0:
            raise ValueError("index set must hold distinct coordinates")
        object.__setattr__(self, "index_set", S)
        if self.kind == "xor":
            object.__setattr__(self, "stages", (len(S),))
            object.__setattr__(self, "weights", (1.0,))
        elif self.kind == "staircase":
            stages = tuple(self.stages) or (1, len(S))
            if len(stages) != len(self.weights) or any(not 1 <= s <= len(S) for s in stages):
                raise ValueError("staircase needs one weight per stage, stages within the index set")
            object.__setattr__(self, "stages", stages)
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        else:
            raise ValueError(f"unknown Boolean target {self.kind!r}")

    def atoms(self):
        raise NotImplementedError("Boolean targets have no atomic teacher representation")

    def __call__(self, X):
        X = np.atleast_2d(X)
        idx = np.array(self.index_set)
        out = np.zeros(X.shape[0])
        for w, s in zip(self.weights, self.stages):
            out += w * np.prod(X[:, idx[:s]], axis=1)
        return out

    def to_config(self):
        return {"kind": self.kind, "index_set": list(self.index_set), "weights": list(self.weights),
                "stages": list(self.stages), "noise_std": self.noise_std}


TargetSpec = AtomicTeachers | SingleIndex | ManifoldCircle | BooleanFn


def target_from_config(cfg) -> TargetSpec:
    kind = cfg["kind"]
    noise = float(cfg.get("noise_std", 0.0))
    if kind == "atomic":
        return AtomicTeachers(np.array(cfg["teachers"]), np.array(cfg["weights"]),
                              link_from_config(cfg["link"]), noise)
    if kind == "single_index":
        return SingleIndex(link_from_config(cfg["link"]), np.array(cfg["w_star"]), noise)
    if kind == "circle":
        return ManifoldCircle(link_from_config(cfg["link"]), np.array(cfg["basis"]),
                              int(cfg.get("n_nodes", CIRCLE_NODES)), noise)
    if kind in ("xor", "staircase"):
        return BooleanFn(kind, tuple(cfg["index_set"]), tuple(cfg.get("weights", (1.0,))),
                         tuple(cfg.get("stages", ())), noise)
    raise ValueError(f"unknown target kind {kind!r}")


def teacher_atoms(target):
    """(teachers, weights, link) for targets with a closed-form representation."""
    if isinstance(target, BooleanFn):
        raise ValueError("Boolean targets have no closed-form teacher atoms")
    T, a = target.atoms()
    return T, a, target.link


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.xs = np.ascontiguousarray(self.xs, dtype=np.float64)
        self.ys = np.ascontiguousarray(self.ys, dtype=np.float64).reshape(-1)
        if self.xs.ndim != 2 or self.xs.shape[0] < 1 or self.xs.shape[0] != self.ys.shape[0]:
            raise ValueError("dataset needs n >= 1 rows and one label per row")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.ys))):
            raise ValueError("dataset entries must be finite")

    @property
    def n(self):
        return self.xs.shape[0]

    @property
    def d(self):
        return self.xs.shape[1]

    def save(self, path):
        header = DATASET_MAGIC + struct.pack("<III", DATASET_VERSION, self.n, self.d)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.xs.astype("<f8").tobytes(order="C"))
            fh.write(self.ys.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, seed=0):
        raw = Path(path).read_bytes()
        if raw[:4] != DATASET_MAGIC:
            raise ValueError("not a dataset file")
        version, n, d = struct.unpack("<III", raw[4:16])
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        body = np.frombuffer(raw, dtype="<f8", offset=16)
        if body.size != n * d + n:
            raise ValueError("truncated dataset file")
        return cls(body[: n * d].reshape(n, d).copy(), body[n * d:].copy(), seed)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{j}" for j in range(self.d)] + ["y"])
            for x, y in zip(self.xs, self.ys):
                wr.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def sample_dataset(cov: CovariateSpec, target: TargetSpec, n: int, seed: int) -> Dataset:
    if getattr(target, "d", cov.d) != cov.d and not isinstance(target, BooleanFn):
        raise ValueError(f"target dimension {target.d} does not match covariates {cov.d}")
    if isinstance(target, BooleanFn) and max(target.index_set) >= cov.d:
        raise ValueError("Boolean index set exceeds the covariate dimension")
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = cov.sample(n, make_rng(seed, "covariates"))
    ys = target(xs)
    if target.noise_std > 0:
        ys = ys + target.noise_std * make_rng(seed, "noise").standard_normal(n)
    return Dataset(xs, ys, seed)


def eval_target(target: TargetSpec, x) -> float:
    return float(target(np.asarray(x, dtype=np.float64)[None, :])[0])


# ---------------------------------------------------------------- initialization

def second_layer_scale(spec) -> float | None:
    """None for all-ones; otherwise the magnitude C of the +/-C signs."""
    if spec is None or spec == "ones":
        return None
    if isinstance(spec, (int, float)):
        return float(spec)
    if isinstance(spec, dict):
        if "signs" in spec:
            return float(spec["signs"])
        if "parity" in spec:
            k = int(spec["parity"])
            return 2.0 ** k / np.sqrt(k)
    raise ValueError(f"bad second-layer spec {spec!r}")


def init_particles(d: int, m: int, seed: int, second_layer=None) -> ParticleSystem:
    """m uniform points on S^{d-1}; rows are a prefix of any larger draw with the same seed."""
    if m < 1:
        raise ValueError("m must be >= 1")
    W = make_rng(seed, "init").standard_normal((m, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    C = second_layer_scale(second_layer)
    b = None
    if C is not None:
        b = C * (make_rng(seed, "signs").integers(0, 2, size=m) * 2.0 - 1.0)
    return ParticleSystem(W, b)


# ---------------------------------------------------------------- problem zoo

@dataclass
class Setting:
    name: str
    covariates: CovariateSpec
    target: TargetSpec
    activation: LinkFunction | SoftPlus
    second_layer: object = None
    eta: float = 0.01
    extra: dict = field(default_factory=dict)


HE4 = (0, 0, 0, 0, 1)


def preset(name: str, d: int | None = None, seed: int = 0) -> Setting:
    """The six problem settings of the width-scaling experiments."""
    e = lambda k, dd: np.eye(dd)[k]
    if name == "he4":
        d = d or 32
        return Setting(name, GaussianIso(d), SingleIndex(LinkFunction(HE4), e(0, d)), LinkFunction(HE4))
    if name == "circle":
        d = d or 64
        return Setting(name, GaussianIso(d), ManifoldCircle(LinkFunction(HE4), np.eye(d)[:2]),
                       LinkFunction(HE4))
    if name == "misspecified":
        d = d or 32
        return Setting(name, GaussianIso(d), SingleIndex(LinkFunction((0, 0, 0, 0, 0.8, 0, 0.6)), e(0, d)),
                       LinkFunction((0, 0, 0, 0, 1, 0, 1)))
    if name == "six_teachers":
        d = d or 64
        T = np.zeros((6, d))
        g = make_rng(seed, "teachers").standard_normal((6, 6))
        T[:, :6] = g / np.linalg.norm(g, axis=1, keepdims=True)
        return Setting(name, GaussianIso(d), AtomicTeachers(T, np.full(6, 1 / 6), LinkFunction(HE4)),
                       LinkFunction(HE4))
    if name == "staircase":
        d = d or 64
        return Setting(name, RademacherCube(d), BooleanFn("staircase", (0, 1, 2, 3), (0.25, 0.75), (1, 4)),
                       SoftPlus(16.0), {"parity": 4}, eta=0.025)
    if name == "xor4":
        d = d or 32
        return Setting(name, RademacherCube(d), BooleanFn("xor", (0, 1, 2, 3)), SoftPlus(16.0),
                       {"parity": 4}, eta=0.05)
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("he4", "circle", "misspecified", "six_teachers", "staircase", "xor4")
