"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from optbench import kernels
from optbench.core_math import RandomStream


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    sym = RandomStream(1).normal((64, 64))
    sym = sym + sym.T
    tol = 1e-12 * np.linalg.norm(sym)
    lam = np.sort((1.0 - RandomStream(2).uniform(1000)) ** -0.5)
    state = RandomStream(3).state
    return {
        "rng 1e6 draws": lambda: kernels.fill_uint64(state.copy(), 1_000_000),
        "jacobi 64x64": lambda: kernels.jacobi_eigenvalues(sym.copy(), tol, 64),
        "ks scan n=1000": lambda: kernels.ks_scan(lam, 10),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = [b for b in ("python", "compiled") if b in kernels.BACKENDS]
    prev = kernels.backend_name()
    results = {}
    for b in backends:
        kernels.use_backend(b)
        for name, fn in cases().items():
            results[(name, b)] = _time(fn, args.repeat)
    kernels.use_backend(prev)
    print(f"{'kernel':<18s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name in cases():
        row = f"{name:<18s}" + "".join(f"{results[(name, b)] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{results[(name, 'python')] / results[(name, 'compiled')]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
