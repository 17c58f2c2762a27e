"""Time the numba and numpy kernel paths against each other.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are importable side by side from ``fpaccel._kernels`` regardless of
``FPACCEL_NUMBA``; the flag only picks which one the solver calls. Shapes match
what the solver sees: a batch of 16 embedding matrices at desk and full
scale, and SOC blocks of the sizes the lasso and kalman embeddings produce.
"""

import argparse
import time

import numpy as np

from fpaccel import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (compiles the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for n in (61, 307):
        M = rng.standard_normal((16, n, n)) + n * np.eye(n)
        rhs = rng.standard_normal((16, n))
        lu, piv = K.lu_factor_numpy(M)
        yield f"lu_factor B=16 n={n}", (lambda M=M: K.lu_factor_numpy(M)), (lambda M=M: K.lu_factor_numba(M))
        yield (f"lu_solve  B=16 n={n}", (lambda: K.lu_solve_numpy(lu, piv, rhs, False)),
               (lambda lu=lu, piv=piv, rhs=rhs: K.lu_solve_numba(lu, piv, rhs, False)))
    for dim in (3, 11, 101):
        x = rng.standard_normal((16 * 50, dim))
        g = rng.standard_normal(x.shape)
        yield f"soc_project rows=800 d={dim}", (lambda x=x: K.soc_project_numpy(x)), (lambda x=x: K.soc_project_numba(x))
        yield (f"soc_vjp     rows=800 d={dim}", (lambda x=x, g=g: K.soc_vjp_numpy(x, g)),
               (lambda x=x, g=g: K.soc_vjp_numba(x, g)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in cases(rng):
        a = best_of(np_fn, args.repeat) * 1e3
        b = best_of(nb_fn, args.repeat) * 1e3
        print(f"{name:<28}{a:>10.3f}{b:>10.3f}{a / b:>8.2f}x")


if __name__ == "__main__":
    main()
