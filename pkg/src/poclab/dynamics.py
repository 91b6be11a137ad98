"""Projected gradient flow of the particle system on the sphere."""
from __future__ import annotations

import csv
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from ._rng import make_rng
from .data import (BooleanFn, Dataset, GaussianIso, Setting, init_particles, sample_dataset,
                   teacher_atoms)
from .kernels import (LinkFunction, cross_pair_kernel, pair_kernel_dsigma, pair_kernel_sigma)
from .particles import ParticleSystem

LOSS_EXACT_MAX_M = 4096
LOSS_PARTNERS = 4096
EMP_CHUNK = 2048
CHECKPOINT_MAGIC = b"PCCK"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "time", "loss_pop", "loss_emp", "mean_alignment")


class NumericalAbort(RuntimeError):
    def __init__(self, msg, dump_path=None):
        super().__init__(msg)
        self.dump_path = dump_path


class ClosedFormUnavailable(ValueError):
    pass


def project_rows(W, V):
    """Remove from each row of V its component along the matching row of W."""
    return V - np.sum(W * V, axis=1, keepdims=True) * W


# ---------------------------------------------------------------- closed forms

@dataclass(frozen=True)
class Kernels:
    """Pair kernels between student-student, student-teacher and teacher-teacher."""

    ss: np.ndarray
    st: np.ndarray
    tt: np.ndarray
    dss: np.ndarray
    dst: np.ndarray

    @classmethod
    def build(cls, activation, teacher_link):
        if not isinstance(activation, LinkFunction) or not isinstance(teacher_link, LinkFunction):
            raise ClosedFormUnavailable("closed-form kernels need Hermite links for student and teacher")
        ss = pair_kernel_sigma(activation)
        st = cross_pair_kernel(activation, teacher_link)
        return cls(ss.array, st.array, pair_kernel_sigma(teacher_link).array,
                   pair_kernel_dsigma(activation).array, st.derivative().array)


def _closed_form(target, activation):
    if isinstance(target, BooleanFn):
        raise ClosedFormUnavailable("Boolean targets need the empirical velocity")
    T, a, tlink = teacher_atoms(target)
    return T, a, Kernels.build(activation, tlink)


def drift_field(Wq, P, bP, T, a, K: Kernels) -> np.ndarray:
    """Unprojected g(w) = sum_l a_l q_st'(w.t_l) t_l - mean_j bP_j q_ss'(w.p_j) p_j for raw arrays.

    No unit-norm checks, so finite-difference oracles can perturb off the sphere.
    """
    Wq = np.atleast_2d(Wq)
    return _accel.pair_field(Wq, T, a, K.dst) - _accel.pair_field(Wq, P, bP, K.dss) / P.shape[0]


def velocity_raw(Wq, P, bP, T, a, K: Kernels, bq=None) -> np.ndarray:
    """(I - w w^T) g(w) per query row, extended off the sphere."""
    Wq = np.atleast_2d(Wq)
    g = drift_field(Wq, P, bP, T, a, K)
    V = g - np.sum(Wq * g, axis=1, keepdims=True) * Wq
    return V if bq is None else np.asarray(bq)[:, None] * V


def closed_form_parts(target, link):
    """(teachers, weights, Kernels) or ClosedFormUnavailable."""
    return _closed_form(target, link)


def population_velocities(system: ParticleSystem, target, link) -> np.ndarray:
    """Velocity of every particle of the system under the population loss."""
    T, a, K = _closed_form(target, link)
    W, b = system.weights, system.b
    g = _accel.pair_field(W, T, a, K.dst) - _accel.pair_field(W, W, b, K.dss) / system.m
    return b[:, None] * project_rows(W, g)


def population_velocity(w, system: ParticleSystem, target, link) -> np.ndarray:
    """nu(w, rho) = P_w (sum_l a_l q'(w.w*_l) w*_l - (1/m) sum_j b_j q'(w.w_j) w_j) at a test point."""
    T, a, K = _closed_form(target, link)
    w = np.asarray(w, dtype=np.float64)
    W1 = np.atleast_2d(w)
    g = _accel.pair_field(W1, T, a, K.dst) - _accel.pair_field(W1, system.weights, system.b, K.dss) / system.m
    out = project_rows(W1, g)
    return out[0] if w.ndim == 1 else out


def loss_population(system: ParticleSystem, target, link, seed: int = 0,
                    exact_max_m: int = LOSS_EXACT_MAX_M, partners: int = LOSS_PARTNERS) -> float:
    """E(f_rho - f*)^2 in closed form.

    Exact pairwise sum up to ``exact_max_m`` particles; above it the self term is
    averaged over a seeded uniform subset of ``partners`` partner particles.
    """
    T, a, K = _closed_form(target, link)
    W, b = system.weights, system.b
    m = system.m
    if m <= exact_max_m:
        self_term = _accel.pair_sum(W, b, W, b, K.ss) / (m * m)
    else:
        J = np.sort(make_rng(seed, "loss_partners").choice(m, size=partners, replace=False))
        self_term = _accel.pair_sum(W, b, W[J], b[J], K.ss) / (m * partners)
    cross = _accel.pair_sum(W, b, T, a, K.st) / m
    const = _accel.pair_sum(T, a, T, a, K.tt)
    return float(self_term - 2.0 * cross + const)


# ---------------------------------------------------------------- empirical

def network_output(system: ParticleSystem, X, act) -> np.ndarray:
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], EMP_CHUNK):
        out[lo:lo + EMP_CHUNK] = act(X[lo:lo + EMP_CHUNK] @ system.weights.T) @ system.b / system.m
    return out


def empirical_velocities(system: ParticleSystem, X, y, act) -> np.ndarray:
    """b_i P_{w_i} (1/n) sum (y - f(x)) sigma'(w_i.x) x for every particle."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    W, b = system.weights, system.b
    acc = np.zeros_like(W)
    for lo in range(0, X.shape[0], EMP_CHUNK):
        Xc = X[lo:lo + EMP_CHUNK]
        S, Sp = act.value_and_slope(Xc @ W.T)
        r = y[lo:lo + EMP_CHUNK] - S @ b / system.m
        Sp *= r[:, None]
        acc += Sp.T @ Xc
    acc /= X.shape[0]
    return b[:, None] * project_rows(W, acc)


def empirical_velocity(w, system: ParticleSystem, batch, act) -> np.ndarray:
    """Empirical velocity at a test point w (unit second-layer weight)."""
    X, y = (batch.xs, batch.ys) if isinstance(batch, Dataset) else batch
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(y) - network_output(system, X, act)
    g = (r * act(X @ w, 1)) @ X / X.shape[0]
    return g - (g @ w) * w


def empirical_loss(system: ParticleSystem, X, y, act) -> float:
    r = np.asarray(y) - network_output(system, X, act)
    return float(np.mean(r * r))


# ---------------------------------------------------------------- stepping

def step(system: ParticleSystem, velocities, eta: float) -> ParticleSystem:
    W = system.weights
    V = np.asarray(velocities, dtype=np.float64)
    if V.shape != W.shape:
        raise ValueError("velocity array shape mismatch")
    radial = np.abs(np.sum(W * V, axis=1))
    if np.any(radial > 1e-8 * np.maximum(1.0, np.linalg.norm(V, axis=1))):
        raise ValueError("velocities must be orthogonal to the particle positions")
    Wn = W + eta * V
    nrm = np.linalg.norm(Wn, axis=1, keepdims=True)
    if not np.all(np.isfinite(nrm)):
        raise NumericalAbort("non-finite particle update")
    if np.any(nrm < 1e-12):
        raise NumericalAbort("degenerate norm in retraction step")
    return system.with_weights(Wn / nrm)


# ---------------------------------------------------------------- problems and runs

@dataclass
class ProblemSpec:
    covariates: object
    target: object
    activation: object
    m: int
    n_train: int = 0
    second_layer: object = None
    name: str = "problem"

    @property
    def d(self):
        return self.covariates.d

    @classmethod
    def from_setting(cls, s: Setting, m: int, n_train: int = 0):
        return cls(s.covariates, s.target, s.activation, m, n_train, s.second_layer, s.name)

    @property
    def closed_form(self) -> bool:
        try:
            _closed_form(self.target, self.activation)
        except ClosedFormUnavailable:
            return False
        return isinstance(self.covariates, GaussianIso)


@dataclass(frozen=True)
class FlowSchedule:
    eta: float
    n_steps: int
    record_every: int = 1
    batch_size: int = 0
    mode: str = "population"
    store_weights: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (0 <= self.eta <= 1):
            raise ValueError("step size must lie in [0, 1]")
        if self.mode not in ("population", "empirical"):
            raise ValueError("mode must be 'population' or 'empirical'")
        if self.n_steps < 0 or self.record_every < 1 or self.batch_size < 0:
            raise ValueError("bad schedule counts")


class BatchOrder:
    """Deterministic epoch-wise shuffles; batch_size 0 means the full dataset."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.bs = batch_size if 0 < batch_size < n else n
        self.seed = seed
        self._epoch = -1
        self._perm = None
        self._pos = n

    def next(self) -> np.ndarray:
        if self.bs == self.n:
            return np.arange(self.n)
        if self._pos >= self.n:
            self._epoch += 1
            self._perm = make_rng(self.seed, "batch", self._epoch).permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.bs]
        self._pos += self.bs
        return np.sort(idx)


@dataclass
class Seeds:
    init: int
    data: int
    batch: int

    @classmethod
    def coerce(cls, seed):
        if isinstance(seed, Seeds):
            return seed
        s = int(seed)
        return cls(s, s, s)


def mean_alignment(system: ParticleSystem, target) -> float:
    if isinstance(target, BooleanFn):
        return float("nan")
    T, _ = target.atoms()
    return float(np.mean(np.max(np.abs(system.weights @ T.T), axis=1)))


@dataclass
class Trajectory:
    eta: float
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    loss_pop: list = field(default_factory=list)
    loss_emp: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    second_layer: np.ndarray | None = None
    checkpoints: list = field(default_factory=list)

    def system_at(self, k: int) -> ParticleSystem:
        return ParticleSystem(self.weights[k], self.second_layer)

    def rows(self):
        for row in zip(self.steps, self.times, self.loss_pop, self.loss_emp, self.alignment):
            yield row

    def write_csv(self, path):
        write_metrics_csv(path, METRIC_COLUMNS, self.rows())


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_metrics_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([fmt(v) for v in r])


def write_checkpoint(path, system: ParticleSystem, step_idx: int, time: float):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IIIQd", CHECKPOINT_VERSION, system.m, system.d,
                                                step_idx, time))
        fh.write(system.weights.astype("<f8").tobytes())
        fh.write(system.b.astype("<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, m, d, step_idx, time = struct.unpack("<IIIQd", raw[4:32])
    body = np.frombuffer(raw, dtype="<f8", offset=32)
    W = body[: m * d].reshape(m, d).copy()
    b = body[m * d: m * d + m].copy()
    return ParticleSystem(W, b), int(step_idx), float(time)


def dump_state(system_weights, step_idx, dump_dir=None) -> str:
    dump_dir = Path(dump_dir) if dump_dir else Path(tempfile.mkdtemp(prefix="poclab_abort_"))
    dump_dir.mkdir(parents=True, exist_ok=True)
    p = dump_dir / f"abort_step{step_idx}.npz"
    np.savez(p, weights=system_weights, step=step_idx)
    return str(p)


class VelocityField:
    """Velocity of a problem's particle system, by closed form or by mini-batches."""

    def __init__(self, problem: ProblemSpec, schedule: FlowSchedule, data: Dataset | None, batch_seed: int):
        self.problem = problem
        self.mode = schedule.mode
        if self.mode == "population" and not problem.closed_form:
            raise ClosedFormUnavailable("population mode needs Gaussian data and Hermite links")
        self.data = data
        self.order = BatchOrder(data.n, schedule.batch_size, batch_seed) if data is not None else None

    def next_batch(self):
        if self.mode == "population":
            return None
        idx = self.order.next()
        return self.data.xs[idx], self.data.ys[idx]

    def __call__(self, system, batch):
        if batch is None:
            return population_velocities(system, self.problem.target, self.problem.activation)
        return empirical_velocities(system, batch[0], batch[1], self.problem.activation)


def make_data(problem: ProblemSpec, schedule: FlowSchedule, seed: int):
    if schedule.mode != "empirical":
        return None
    if problem.n_train < 1:
        raise ValueError("empirical mode needs n_train >= 1")
    return sample_dataset(problem.covariates, problem.target, problem.n_train, seed)


def run_flow(problem: ProblemSpec, schedule: FlowSchedule, seed, *, system: ParticleSystem | None = None,
             checkpoint_dir=None, dump_dir=None) -> Trajectory:
    seeds = Seeds.coerce(seed)
    data = make_data(problem, schedule, seeds.data)
    field_ = VelocityField(problem, schedule, data, seeds.batch)
    if system is None:
        system = init_particles(problem.d, problem.m, seeds.init, problem.second_layer)
    traj = Trajectory(schedule.eta, second_layer=system.second_layer)
    closed = problem.closed_form

    def record(k, sys_):
        traj.steps.append(k)
        traj.times.append(k * schedule.eta)
        if schedule.store_weights:
            traj.weights.append(sys_.weights.copy())
        traj.loss_pop.append(loss_population(sys_, problem.target, problem.activation) if closed else float("nan"))
        traj.loss_emp.append(empirical_loss(sys_, data.xs, data.ys, problem.activation)
                             if data is not None else float("nan"))
        traj.alignment.append(mean_alignment(sys_, problem.target))

    def checkpoint(k, sys_):
        if checkpoint_dir and schedule.checkpoint_every and k % schedule.checkpoint_every == 0:
            p = Path(checkpoint_dir) / f"ckpt_{k:08d}.bin"
            write_checkpoint(p, sys_, k, k * schedule.eta)
            traj.checkpoints.append(str(p))

    record(0, system)
    checkpoint(0, system)
    for k in range(1, schedule.n_steps + 1):
        V = field_(system, field_.next_batch())
        if not np.all(np.isfinite(V)):
            raise NumericalAbort(f"non-finite velocity at step {k}", dump_state(system.weights, k - 1, dump_dir))
        try:
            system = step(system, V, schedule.eta)
        except (NumericalAbort, FloatingPointError) as exc:
            raise NumericalAbort(f"{exc} at step {k}", dump_state(system.weights, k - 1, dump_dir)) from exc
        if k % schedule.record_every == 0 or k == schedule.n_steps:
            record(k, system)
        checkpoint(k, system)
    return traj
