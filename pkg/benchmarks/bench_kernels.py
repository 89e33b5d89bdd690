"""Time the compiled MMD kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 200 1000 2000] [--dim 64] [--repeat 5]

Prints one line per (kernel, size) with the median time of each backend and
the speedup. Results also agree to 1e-12 relative, which is checked here.
"""
import argparse
import statistics
import time

import numpy as np

from ttabench import _kernels_py

try:
    from ttabench import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def run(sizes, dim, repeat, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        X, Y = rng.normal(size=(n, dim)), rng.normal(size=(n, dim)) + 0.1
        gamma = 1.0 / (2 * dim)
        cases = {
            "rbf_kernel_sum": lambda k: k.rbf_kernel_sum(X, Y, gamma, False),
            "rbf_kernel_sum(diag)": lambda k: k.rbf_kernel_sum(X, X, gamma, True),
            "pairwise_sq_dists_upper": lambda k: k.pairwise_sq_dists_upper(X),
        }
        for name, call in cases.items():
            tp = _time(lambda: call(_kernels_py), repeat)
            row = {"kernel": name, "n": n, "python_ms": 1e3 * tp}
            if _kernels_c is not None:
                a, b = call(_kernels_py), call(_kernels_c)
                if np.ndim(a):
                    assert np.allclose(np.sort(a), np.sort(b), rtol=1e-12)
                else:
                    assert abs(a - b) <= 1e-12 * abs(a)
                tc = _time(lambda: call(_kernels_c), repeat)
                row.update(cython_ms=1e3 * tc, speedup=tp / tc)
            rows.append(row)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[200, 1000, 2000])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; timing the numpy fallback only")
    for r in run(args.sizes, args.dim, args.repeat):
        line = f"{r['kernel']:<26} n={r['n']:<6} python {r['python_ms']:9.2f} ms"
        if "cython_ms" in r:
            line += f"   cython {r['cython_ms']:9.2f} ms   x{r['speedup']:.2f}"
        print(line)


if __name__ == "__main__":
    main()
