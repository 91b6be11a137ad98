"""Time the numba and numpy backends on the hot kernels and check they agree.

Each backend runs in its own subprocess because the backend is chosen at import:

    python benchmarks/bench_backends.py [--m 2048] [--d 32] [--repeats 5]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from poclab import _accel
from poclab.data import init_particles, preset
from poclab.dynamics import ProblemSpec, population_velocities, empirical_velocities
from poclab.reduced import ensemble_quantiles, hermite_link, run_reduced

m, d, reps = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
prob = ProblemSpec.from_setting(preset("he4", d), m)
sysm = init_particles(d, m, 0, None)
rng = np.random.default_rng(1)
X = rng.standard_normal((1024, d))
y = prob.target(X)

def clock(fn):
    fn()  # warm-up (includes compilation)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out

res = {"backend": _accel.BACKEND}
t, V = clock(lambda: population_velocities(sysm, prob.target, prob.activation))
res["population_velocity"] = t
res["population_checksum"] = float(np.abs(V).sum())
t, V = clock(lambda: empirical_velocities(sysm, X, y, prob.activation))
res["empirical_velocity"] = t
res["empirical_checksum"] = float(np.abs(V).sum())
t, run = clock(lambda: run_reduced(hermite_link(4), 32, ensemble_quantiles(32), 0.01, 0.3, record_every=10**6))
res["reduced_ode"] = t
res["reduced_T"] = run.T_delta
print(json.dumps(res))
"""


def run_backend(name, m, d, reps):
    env = dict(os.environ, POC_LAB_BACKEND=name)
    out = subprocess.run([sys.executable, "-c", WORKER, str(m), str(d), str(reps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=2048)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    nb = run_backend("numba", args.m, args.d, args.repeats)
    npy = run_backend("numpy", args.m, args.d, args.repeats)
    print(f"m={args.m} d={args.d}, best of {args.repeats} (seconds)")
    print(f"{'kernel':<22}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for k in ("population_velocity", "empirical_velocity", "reduced_ode"):
        print(f"{k:<22}{nb[k]:>12.4g}{npy[k]:>12.4g}{npy[k] / nb[k]:>10.2f}")
    for k in ("population_checksum", "empirical_checksum", "reduced_T"):
        rel = abs(nb[k] - npy[k]) / max(abs(npy[k]), 1e-300)
        print(f"{k:<22} relative difference {rel:.2e}")


if __name__ == "__main__":
    main()
