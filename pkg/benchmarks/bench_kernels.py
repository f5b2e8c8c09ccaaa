"""Compare the numba and numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py            # kernel timings, both paths
    python3 benchmarks/bench_kernels.py --e2e      # also a lasso + MARS fit end to end,
                                                   # once per APTMLE_DISABLE_NUMBA setting

Kernel timings call the two implementations directly (after a warm-up call so
numba compile time is excluded) and check that they agree.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from aptmle import _kernels as K


def _cd_problem(rng, n, p):
    X = rng.standard_normal((n, p))
    z = X[:, :5] @ rng.standard_normal(5) + rng.standard_normal(n)
    w = rng.uniform(0.5, 1.5, n)
    pen = np.ones(p, dtype=np.bool_)
    pen[0] = False
    return X, z, w, 0.05, pen, np.zeros(p), 10_000, 1e-12


def _knot_problem(rng, n, m):
    x = rng.standard_normal(n)
    Q, _ = np.linalg.qr(np.column_stack([np.ones(n), rng.standard_normal((n, m - 1))]))
    r = rng.standard_normal(n)
    r -= Q @ (Q.T @ r)
    knots = np.unique(x)[1:-1]
    return x, knots, Q, r


def _time(fn, args, number):
    fn(*args)  # warm-up / compile
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=3)) / number


def bench_kernels(sizes):
    if not K.USE_NUMBA:
        print("numba path disabled (APTMLE_DISABLE_NUMBA set or numba missing); numpy only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'size':>14}{'numpy (ms)':>14}{'numba (ms)':>14}{'speedup':>10}  max|diff|")
    for n, p in sizes:
        args = _cd_problem(rng, n, p)
        t_np = _time(K._cd_wls_numpy, args, 3)
        b_np, _ = K._cd_wls_numpy(*args)
        row = f"{'lasso_cd':<12}{f'{n}x{p}':>14}{t_np * 1e3:>14.2f}"
        if K.USE_NUMBA:
            t_nb = _time(K._cd_wls_numba, args, 3)
            b_nb, _ = K._cd_wls_numba(*args)
            row += f"{t_nb * 1e3:>14.2f}{t_np / t_nb:>10.1f}  {np.max(np.abs(b_np - b_nb)):.1e}"
        print(row)
    for n, p in sizes:
        args = _knot_problem(rng, n, min(p, 20))
        t_np = _time(K._knot_gains_numpy, args, 3)
        g_np = K._knot_gains_numpy(*args)[0]
        row = f"{'mars_knots':<12}{f'{n}x{min(p, 20)}':>14}{t_np * 1e3:>14.2f}"
        if K.USE_NUMBA:
            t_nb = _time(K._knot_gains_numba, args, 3)
            g_nb = K._knot_gains_numba(*args)[0]
            rel = np.max(np.abs(g_np - g_nb)) / max(np.max(np.abs(g_np)), 1e-300)
            row += f"{t_nb * 1e3:>14.2f}{t_np / t_nb:>10.1f}  {rel:.1e} (rel)"
        print(row)


_E2E = """
import time, numpy as np
from aptmle import _kernels
from aptmle.data_model import TrialDataset
from aptmle.learners import fit_outcome_learner, parse_learner
rng = np.random.default_rng(1)
n = 400
W = rng.standard_normal((n, 8))
a = rng.permutation(np.repeat([0, 1], n // 2))
y = W[:, 0] + np.abs(W[:, 1]) + 0.3 * a + rng.standard_normal(n)
y = (y - y.min()) / np.ptp(y)  # learners work on the bounded [0, 1] scale
d = TrialDataset.from_arrays(a, y, W)
for label in ("lasso", "mars"):
    spec = parse_learner(label)
    fit_outcome_learner(spec, d, seed=0)  # warm-up
    t = time.perf_counter()
    for _ in range(3):
        fit_outcome_learner(spec, d, seed=0)
    print(f"  {_kernels.BACKEND:<6} {label:<6} {(time.perf_counter() - t) / 3 * 1e3:8.1f} ms per fit")
"""


def bench_end_to_end():
    print("\nend to end (one process per backend):")
    for flag in ("0", "1"):
        env = dict(os.environ, APTMLE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True)
        sys.stdout.write(out.stdout or out.stderr)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="also time full learner fits under both settings")
    args = ap.parse_args(argv)
    bench_kernels([(200, 10), (1000, 50), (5000, 100)])
    if args.e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()
