#!/usr/bin/env python
"""Time the numba kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sides 32 64 128 --repeat 5
    python benchmarks/bench_kernels.py --output bench.json

The kernel path is chosen once per process from ``TOMOMIP_DISABLE_NUMBA``, so
the script runs itself twice in child processes (flag off / on), then prints
best-of-N wall times side by side with a checksum comparison of the outputs.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile or cache load)
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def run_child(args):
    from tomomip import kernels
    from tomomip._accel import USE_NUMBA
    from tomomip.datasets import rng_for
    from tomomip.projector import build_geometry

    rows = []
    for side in args.sides:
        g = build_geometry(20, 0.0, side)
        th = np.deg2rad(np.asarray(g.angles_deg))
        t, (r, c, v) = best_of(lambda: kernels.trace_rays(th, g.offsets, side), args.repeat)
        rows.append({"kernel": "siddon", "size": side, "seconds": t, "checksum": float(v.sum())})

        img = rng_for(side).random((side, side))
        t, out = best_of(lambda: kernels.grad_adj(*kernels.grad(img)), args.repeat)
        rows.append({"kernel": "tv_grad+adjoint", "size": side, "seconds": t,
                     "checksum": float(np.abs(out).sum())})
    for n in args.lp_sizes:
        rng = rng_for(n)
        m = n // 2
        A = rng.normal(size=(m, n))
        lo, hi = -rng.random(n), rng.random(n) + 0.5
        b = A @ (lo + (hi - lo) * rng.random(n))
        cost = rng.normal(size=n)
        reps = args.repeat if USE_NUMBA else 1
        t, (status, x, _) = best_of(lambda: kernels.bounded_simplex(A, b, cost, lo, hi, 100000),
                                    reps)
        rows.append({"kernel": "bounded_simplex", "size": n, "seconds": t,
                     "checksum": float(cost @ x) if status == 0 else float("nan")})
    json.dump({"numba": USE_NUMBA, "rows": rows}, sys.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sides", type=int, nargs="+", default=[32, 64])
    ap.add_argument("--lp-sizes", type=int, nargs="+", default=[20, 60])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--output")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        run_child(args)
        return

    results = {}
    for label, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, TOMOMIP_DISABLE_NUMBA=flag)
        cmd = [sys.executable, __file__, "--child", "--repeat", str(args.repeat),
               "--sides", *map(str, args.sides), "--lp-sizes", *map(str, args.lp_sizes)]
        out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
        results[label] = json.loads(out)

    print(f"{'kernel':<18}{'size':>6}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}"
          f"{'rel. diff':>11}")
    numba_ran = results["numba"]["numba"]
    for a, b in zip(results["numpy"]["rows"], results["numba"]["rows"]):
        speed = f"{a['seconds'] / b['seconds']:8.1f}x" if numba_ran else "     n/a"
        diff = abs(a["checksum"] - b["checksum"]) / max(1.0, abs(a["checksum"]))
        print(f"{a['kernel']:<18}{a['size']:>6}{a['seconds']:12.5f}{b['seconds']:12.5f}"
              f"{speed}{diff:11.1e}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
