"""Hot numeric kernels: batched dense LU and second-order cone projections.

Each kernel exists twice, a numba ``@njit`` loop version and a numpy/scipy
version. ``FPACCEL_NUMBA=0`` in the environment (or numba being missing)
selects the numpy path at import time. Both paths share the LAPACK getrf
conventions (combined L/U storage, 0-based sequential row swaps) so their
factors are interchangeable.
"""

import os
import warnings

import numpy as np
import scipy.linalg

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("FPACCEL_NUMBA", "1") != "0"


class SingularMatrixError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# numpy / scipy path
# ---------------------------------------------------------------------------


def lu_factor_numpy(M):
    """Factor a stack of square matrices, shape (B, n, n)."""
    B, n, _ = M.shape
    lu = np.empty_like(M)
    piv = np.empty((B, n), dtype=np.int64)
    for k in range(B):
        with warnings.catch_warnings():
            # singular pivots are reported below as an exception instead
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu[k], piv[k] = scipy.linalg.lu_factor(M[k], check_finite=False)
        if np.any(np.diag(lu[k]) == 0.0):
            raise SingularMatrixError(f"exactly singular pivot in matrix {k}")
    return lu, piv


def lu_solve_numpy(lu, piv, rhs, trans):
    out = np.empty_like(rhs)
    for k in range(rhs.shape[0]):
        out[k] = scipy.linalg.lu_solve((lu[k], piv[k]), rhs[k], trans=trans, check_finite=False)
    return out


def soc_project_numpy(x):
    """Project each row of ``x`` (shape (K, d), head first) onto the SOC."""
    t = x[:, 0]
    r = np.linalg.norm(x[:, 1:], axis=1)
    out = np.zeros_like(x)
    inside = r <= t
    out[inside] = x[inside]
    mid = ~inside & (r > -t)
    if mid.any():
        a = 0.5 * (r[mid] + t[mid])
        out[mid, 0] = a
        out[mid, 1:] = (a / r[mid])[:, None] * x[mid, 1:]
    return out


def soc_vjp_numpy(x, g):
    t = x[:, 0]
    xs = x[:, 1:]
    r = np.linalg.norm(xs, axis=1)
    out = np.zeros_like(x)
    inside = r < t
    out[inside] = g[inside]
    # boundaries |x| == |t| take the outside-cone formula
    mid = ~inside & (r >= -t) & (r > 0)
    if mid.any():
        rm, tm = r[mid], t[mid]
        gt, gx = g[mid, 0], g[mid, 1:]
        xh = xs[mid] / rm[:, None]
        ratio = tm / rm
        xg = np.sum(xh * gx, axis=1)
        out[mid, 0] = 0.5 * (gt + xg)
        out[mid, 1:] = 0.5 * (
            xh * gt[:, None]
            + (1.0 + ratio)[:, None] * gx
            - (ratio * xg)[:, None] * xh
        )
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _getrf(a, piv):
        n = a.shape[0]
        for j in range(n):
            p = j
            best = abs(a[j, j])
            for i in range(j + 1, n):
                v = abs(a[i, j])
                if v > best:
                    best = v
                    p = i
            piv[j] = p
            if best == 0.0:
                return False
            if p != j:
                for c in range(n):
                    tmp = a[j, c]
                    a[j, c] = a[p, c]
                    a[p, c] = tmp
            inv = 1.0 / a[j, j]
            for i in range(j + 1, n):
                a[i, j] *= inv
            for i in range(j + 1, n):
                lij = a[i, j]
                if lij != 0.0:
                    for c in range(j + 1, n):
                        a[i, c] -= lij * a[j, c]
        return True

    @numba.njit(cache=True)
    def _lu_factor_batch(M, lu, piv):
        for k in range(M.shape[0]):
            lu[k] = M[k]
            if not _getrf(lu[k], piv[k]):
                return k
        return -1

    @numba.njit(cache=True)
    def _lu_solve_batch(lu, piv, rhs, out, trans):
        B, n = rhs.shape
        for k in range(B):
            a = lu[k]
            x = out[k]
            for i in range(n):
                x[i] = rhs[k, i]
            if trans == 0:
                for i in range(n):
                    p = piv[k, i]
                    if p != i:
                        tmp = x[i]
                        x[i] = x[p]
                        x[p] = tmp
                for i in range(n):
                    s = x[i]
                    for j in range(i):
                        s -= a[i, j] * x[j]
                    x[i] = s
                for i in range(n - 1, -1, -1):
                    s = x[i]
                    for j in range(i + 1, n):
                        s -= a[i, j] * x[j]
                    x[i] = s / a[i, i]
            else:
                # M^T = U^T L^T P
                for i in range(n):
                    s = x[i]
                    for j in range(i):
                        s -= a[j, i] * x[j]
                    x[i] = s / a[i, i]
                for i in range(n - 1, -1, -1):
                    s = x[i]
                    for j in range(i + 1, n):
                        s -= a[j, i] * x[j]
                    x[i] = s
                for i in range(n - 1, -1, -1):
                    p = piv[k, i]
                    if p != i:
                        tmp = x[i]
                        x[i] = x[p]
                        x[p] = tmp

    @numba.njit(cache=True)
    def _soc_project(x, out):
        K, d = x.shape
        for k in range(K):
            t = x[k, 0]
            r = 0.0
            for i in range(1, d):
                r += x[k, i] * x[k, i]
            r = np.sqrt(r)
            if r <= t:
                for i in range(d):
                    out[k, i] = x[k, i]
            elif r <= -t:
                for i in range(d):
                    out[k, i] = 0.0
            else:
                a = 0.5 * (r + t)
                out[k, 0] = a
                s = a / r
                for i in range(1, d):
                    out[k, i] = s * x[k, i]

    @numba.njit(cache=True)
    def _soc_vjp(x, g, out):
        K, d = x.shape
        for k in range(K):
            t = x[k, 0]
            r = 0.0
            for i in range(1, d):
                r += x[k, i] * x[k, i]
            r = np.sqrt(r)
            if r < t:
                for i in range(d):
                    out[k, i] = g[k, i]
            elif r < -t or r == 0.0:
                for i in range(d):
                    out[k, i] = 0.0
            else:
                ratio = t / r
                xg = 0.0
                for i in range(1, d):
                    xg += x[k, i] * g[k, i]
                xg /= r
                out[k, 0] = 0.5 * (g[k, 0] + xg)
                for i in range(1, d):
                    xh = x[k, i] / r
                    out[k, i] = 0.5 * (xh * g[k, 0] + (1.0 + ratio) * g[k, i] - ratio * xg * xh)

    def lu_factor_numba(M):
        B, n, _ = M.shape
        lu = np.empty_like(M)
        piv = np.empty((B, n), dtype=np.int64)
        bad = _lu_factor_batch(np.ascontiguousarray(M), lu, piv)
        if bad >= 0:
            raise SingularMatrixError(f"exactly singular pivot in matrix {bad}")
        return lu, piv

    def lu_solve_numba(lu, piv, rhs, trans):
        out = np.empty_like(rhs)
        _lu_solve_batch(lu, piv, np.ascontiguousarray(rhs), out, int(trans))
        return out

    def soc_project_numba(x):
        out = np.empty_like(x)
        _soc_project(np.ascontiguousarray(x), out)
        return out

    def soc_vjp_numba(x, g):
        out = np.empty_like(x)
        _soc_vjp(np.ascontiguousarray(x), np.ascontiguousarray(g), out)
        return out


def _select(name):
    if USE_NUMBA:
        return globals()[name + "_numba"]
    return globals()[name + "_numpy"]


# LAPACK's blocked getrf beats the unblocked numba loop at every size we use
# (see benchmarks/bench_kernels.py), and factors are computed once per problem.
lu_factor = lu_factor_numpy
lu_solve = _select("lu_solve")
soc_project = _select("soc_project")
soc_vjp = _select("soc_vjp")
