"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The compiled variants are warmed up once before timing.  An end-to-end
planet-LP solve is also timed in two subprocesses, one per value of
BABVERIFY_NUMBA, since the flag is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from babverify import _kernels as K

E2E = """
import time, numpy as np
from babverify import datagen, oracle
from babverify.model import InputDomain
from babverify.relax import linear_backward_bounds
net = datagen.random_network([5, 16, 16, 1], 0.6, seed=3, center=np.full(5, 0.5))
dom = InputDomain(np.full(5, 0.4), np.full(5, 0.6))
stack = linear_backward_bounds(net, dom)
oracle.planet_lp_solve(net, stack, None)
t = time.perf_counter()
for _ in range({n}):
    oracle.planet_lp_solve(net, stack, None)
print((time.perf_counter() - t) / {n})
"""


def _tableau(rng, m, n):
    A = rng.uniform(0.1, 1.0, size=(m, n))
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = rng.uniform(1.0, 2.0, size=m)
    T[m, :n] = -rng.uniform(0.1, 1.0, size=n)
    return T, np.arange(n, n + m, dtype=np.int64)


def bench_triangle(repeat):
    rng = np.random.default_rng(0)
    size = 200 * 64
    c, d = rng.normal(size=size), rng.normal(size=size)
    lo = rng.uniform(-1, 0.2, size=size)
    up = lo + rng.uniform(0.0, 1.5, size=size)
    args = (c, d, lo, up)
    K._triangle_argmin_nb(*args)
    t_nb = min(timeit.repeat(lambda: K._triangle_argmin_nb(*args), number=20, repeat=repeat)) / 20
    t_py = min(timeit.repeat(lambda: K._triangle_argmin_py(*args), number=20, repeat=repeat)) / 20
    return t_nb, t_py


def bench_simplex(repeat):
    rng = np.random.default_rng(1)
    T0, b0 = _tableau(rng, 60, 80)
    K._simplex_pivots_nb(T0.copy(), b0.copy(), 50_000, 1e-11, 50)

    def run(fn):
        fn(T0.copy(), b0.copy(), 50_000, 1e-11, 50)

    t_nb = min(timeit.repeat(lambda: run(K._simplex_pivots_nb), number=5, repeat=repeat)) / 5
    t_py = min(timeit.repeat(lambda: run(K._simplex_pivots_py), number=5, repeat=repeat)) / 5
    return t_nb, t_py


def bench_e2e(n):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, BABVERIFY_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E.format(n=n)], env=env, capture_output=True,
                             text=True, check=True)
        out[flag] = float(res.stdout.strip().splitlines()[-1])
    return out["1"], out["0"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e-solves", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is disabled or missing; nothing to compare")
    rows = [("triangle_argmin (12800 neurons)",) + bench_triangle(args.repeat),
            ("simplex_pivots (60x80 tableau)",) + bench_simplex(args.repeat),
            ("planet LP solve, end to end",) + bench_e2e(args.e2e_solves)]
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, t_nb, t_py in rows:
        print(f"{name:34s} {1e3 * t_nb:10.3f} {1e3 * t_py:10.3f} {t_py / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
