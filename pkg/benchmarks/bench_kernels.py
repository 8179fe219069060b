"""Compare the compiled kernels with the numpy/scipy fallback.

Run: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from messpy import _kernels_py as py
from messpy.weights import GridSpec, build_grid_contiguity, build_knn, grid_coordinates

try:
    from messpy import _kernels as cy
except ImportError:
    cy = None


def _csr_parts(W):
    A = W.csr if hasattr(W, "csr") else W
    return (np.ascontiguousarray(A.indptr, dtype=np.int32), np.ascontiguousarray(A.indices, dtype=np.int32),
            np.ascontiguousarray(A.data, dtype=np.float64))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    spec = GridSpec(5, 15)
    cases = {"grid W1 (n=486)": build_grid_contiguity(spec),
             "kNN5 (n=486)": build_knn(grid_coordinates(spec)[0], 5)}
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38s}{'python ms':>12s}{'cython ms':>12s}{'speedup':>10s}{'max diff':>12s}")
    for label, W in cases.items():
        ip, ix, dt = _csr_parts(W)
        n = len(ip) - 1
        for m in (1, 3):
            V = np.ascontiguousarray(rng.standard_normal((n, m)))
            jobs = {
                f"taylor_action m={m} {label}": lambda k: k.taylor_action(ip, ix, dt, -1.5, V, 1e-12, 60),
                f"power_stack q=30 m={m} {label}": lambda k: k.power_stack(ip, ix, dt, V, 30),
            }
            for name, job in jobs.items():
                t_py = min(timeit.repeat(lambda: job(py), number=1, repeat=args.repeat)) * 1e3
                if cy is None:
                    print(f"{name:<38s}{t_py:>12.3f}{'n/a':>12s}")
                    continue
                t_cy = min(timeit.repeat(lambda: job(cy), number=1, repeat=args.repeat)) * 1e3
                a, b = job(py), job(cy)
                a, b = (a[0], b[0]) if isinstance(a, tuple) else (a, b)
                diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
                print(f"{name:<38s}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>10.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
