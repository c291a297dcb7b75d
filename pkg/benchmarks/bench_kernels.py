"""Compare the numba and numpy paths of the interior-point hot loops.

Usage::

    python benchmarks/bench_kernels.py [--blocks K] [--size s] [--slots v] [--repeat r]
    python benchmarks/bench_kernels.py --solve pendulum   # end-to-end, both paths

The kernel timings use the same random block data for both paths and
check that they agree.  ``--solve`` runs one analysis in a subprocess with
and without ``DISSIPA_DISABLE_NUMBA=1``.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dissipa import _kernels as K


def _data(k, s, v, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((k, v, s, s))
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    W = rng.standard_normal((k, s, s))
    W = W @ np.swapaxes(W, -1, -2) + s * np.eye(s)
    N = 4 * v
    idx = rng.integers(0, N, (k, v))
    pos = rng.integers(0, N * N, (k, v, v))
    X = rng.standard_normal((k, s, s))
    y = rng.standard_normal(N)
    return A, W, idx, pos, X, y, N


def _best(fn, repeat):
    fn()  # warm-up (and numba compilation)
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def bench(k=20000, s=3, v=8, repeat=5):
    A, W, idx, pos, X, y, N = _data(k, s, v)
    cases = {
        "schur": (lambda: K.schur_values_numpy(A, W, pos, N * N), lambda: K.schur_values_numba(A, W, pos, N * N)),
        "adjoint": (lambda: K.adjoint_numpy(A, idx, X, N), lambda: K.adjoint_numba(A, idx, X, N)),
        "forward": (lambda: K.forward_numpy(A, idx, y), lambda: K.forward_numba(A, idx, y)),
    }
    print(f"blocks={k} size={s} slots={v} numba_available={K.numba_available()}")
    print(f"{'kernel':<10}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'max diff':>12}")
    for name, (fnp, fnb) in cases.items():
        diff = float(np.max(np.abs(fnp() - fnb())))
        tn = _best(fnp, repeat)
        tb = _best(fnb, repeat)
        print(f"{name:<10}{tn * 1e3:>12.2f}{tb * 1e3:>12.2f}{tn / tb:>10.1f}{diff:>12.2e}")


def solve_both(config):
    for flag in ("0", "1"):
        env = dict(os.environ, DISSIPA_DISABLE_NUMBA=flag)
        code = ("import time; from dissipa.cli import load_config; from dissipa.analysis import analyze; "
                f"cfg = load_config({config!r}); cfg.verify.enabled = False; t = time.perf_counter(); "
                "r = analyze(cfg.request()); print(r.status, r.headline, round(r.timings['solve_s'], 2))")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        print(f"DISSIPA_DISABLE_NUMBA={flag}: {out.stdout.strip()}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=20000)
    ap.add_argument("--size", type=int, default=3)
    ap.add_argument("--slots", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solve", help="bundled config to solve with both paths")
    a = ap.parse_args()
    bench(a.blocks, a.size, a.slots, a.repeat)
    if a.solve:
        solve_both(a.solve)
