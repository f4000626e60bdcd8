"""Compiled vs pure-Python geometry kernels.

Times closest-point queries and ray casts on icospheres of growing size with
both backends, checks that they agree and prints a table of timings and speedups.

    python3 benchmarks/bench_geometry.py [--points 4096] [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from meshfield.geometry import ClosestPointIndex, icosphere, tube
from meshfield.geometry.query import _native


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases():
    for level in (2, 3, 4):
        yield f"icosphere/{level}", icosphere(level)
    yield "tube", tube()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _native is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(-1.2, 1.2, size=(args.points, 3))
    origins = rng.normal(size=(args.points, 3))
    origins *= 2.0 / np.linalg.norm(origins, axis=1, keepdims=True)
    dirs = rng.normal(scale=0.2, size=(args.points, 3)) - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    print(f"{'mesh':<14}{'faces':>7}  {'query':<9}{'python s':>10}{'cython s':>10}{'speedup':>9}")
    for name, mesh in cases():
        idx = {b: ClosestPointIndex(mesh, backend=b) for b in ("python", "cython")}
        for label, call in (
            ("closest", lambda i: i.signed_distance(pts)),
            ("raycast", lambda i: i.raycast(origins, dirs)[0]),
        ):
            t_py, r_py = best_of(lambda: call(idx["python"]), args.repeat)
            t_c, r_c = best_of(lambda: call(idx["cython"]), args.repeat)
            fin = np.isfinite(r_py)
            if not (np.array_equal(fin, np.isfinite(r_c)) and np.allclose(r_py[fin], r_c[fin], atol=1e-12)):
                raise SystemExit(f"{name} {label}: backends disagree")
            print(f"{name:<14}{mesh.n_faces:>7}  {label:<9}{t_py:>10.4f}{t_c:>10.4f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
