"""Benchmark the compiled hinge-sweep kernel against the numpy fallback.

Run:  python benchmarks/mars_kernel.py [n_points]

Fits the adaptive hinge regression on data shaped like the backward-solver
targets (two correlated state variables, noisy value response) with both
kernels and reports wall time and agreement.
"""

import sys
import time

import numpy as np

import hestonbounds.regression as reg
from hestonbounds import _mars_py

try:
    from hestonbounds import _mars_fast
except ImportError:
    _mars_fast = None


def make_data(n, rng):
    s = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, n)) - 0.01)
    v = np.abs(0.04 + np.cumsum(rng.normal(0, 0.002, n)))
    x = np.column_stack([s, v])
    y = np.maximum(s - 100.0, 0.0) * np.exp(-2.0 * v) + 4.0 * rng.normal(size=n)
    return x, y


def run(kernel, x, y, repeats):
    reg.hinge_sweep = kernel
    best = np.inf
    fit = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        fit = reg.mars_fit(x, y, max_terms=21, degree=2, knots="all", fit_subsample=25_000)
        best = min(best, time.perf_counter() - t0)
    return best, fit


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
    rng = np.random.default_rng(0)
    x, y = make_data(n, rng)
    repeats = 3 if n <= 200_000 else 1

    print(f"adaptive hinge regression forward pass, n={n}, 2 inputs, 21 max terms")
    t_py, fit_py = run(_mars_py.hinge_sweep, x, y, repeats)
    print(f"  python kernel:   {t_py * 1e3:8.1f} ms   rss/n {fit_py.rss / n:.5f}  terms {fit_py.n_terms}")
    if _mars_fast is None:
        print("  compiled kernel: not built (pip install -e . with a C compiler)")
        return
    t_c, fit_c = run(_mars_fast.hinge_sweep, x, y, repeats)
    print(f"  compiled kernel: {t_c * 1e3:8.1f} ms   rss/n {fit_c.rss / n:.5f}  terms {fit_c.n_terms}")
    print(f"  speedup: {t_py / t_c:.1f}x")
    pts = make_data(1000, rng)[0]
    gap = float(np.max(np.abs(fit_py.predict(pts) - fit_c.predict(pts))))
    print(f"  max prediction difference between kernels: {gap:.2e}")


if __name__ == "__main__":
    main()
