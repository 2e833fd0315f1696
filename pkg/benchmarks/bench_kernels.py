"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats N]

Prints one line per kernel with the median time of each backend and the
largest absolute difference between their outputs.
"""

import argparse
import time

import numpy as np

from pertpinn import kernels
from pertpinn.cascade import build_plan
from pertpinn.problem import kpp_polynomial


def _median_time(fn, repeats):
    fn()  # warm-up (numba compiles here)
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return float(np.median(runs))


def cases(rng):
    plan = build_plan(kpp_polynomial(1, 10), 10)
    coeffs, exps = plan.terms(10)
    u = rng.normal(size=(10, 1024)) * 0.3
    yield "source_sum (kpp n2=10, j=10)", lambda: kernels.source_sum(u, coeffs, exps)

    pc = rng.normal(size=12)
    v = rng.normal(size=101 * 101)
    yield "horner (degree 11, 101x101)", lambda: kernels.horner(pc, v)

    n = 199
    ui = rng.normal(size=n)
    f = rng.normal(size=n)
    pk = np.array([0.0, -1.0, 1.0])
    yield "laplacian_rhs (n_x=201)", lambda: kernels.laplacian_rhs(ui, 1.0, 0.0, 0.01, 0.0, 0.0, -0.1,
                                                                    0.5, pk, f)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy backend can run")
    print(f"{'kernel':<32}{'numpy s':>12}{'numba s':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases(np.random.default_rng(0)):
        kernels.use_numba(False)
        t_np, ref = _median_time(fn, args.repeats), fn()
        if kernels.NUMBA_AVAILABLE:
            kernels.use_numba(True)
            t_nb, out = _median_time(fn, args.repeats), fn()
            diff = float(np.max(np.abs(out - ref)))
            print(f"{name:<32}{t_np:>12.2e}{t_nb:>12.2e}{t_np / t_nb:>10.1f}{diff:>12.1e}")
        else:
            print(f"{name:<32}{t_np:>12.2e}{'-':>12}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
