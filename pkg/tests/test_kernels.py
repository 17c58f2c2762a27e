"""The numba and numpy kernel paths must agree; the solver may use either."""

import numpy as np
import pytest

from fpaccel import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("n", [1, 2, 7, 40])
def test_lu_paths_agree(n):
    rng = np.random.default_rng(n)
    M = rng.standard_normal((3, n, n)) + np.eye(n)
    rhs = rng.standard_normal((3, n))
    lu_a, piv_a = K.lu_factor_numpy(M)
    lu_b, piv_b = K.lu_factor_numba(M)
    assert np.array_equal(piv_a, piv_b)
    assert np.allclose(lu_a, lu_b, rtol=1e-12, atol=1e-12)
    for trans in (0, 1):
        a = K.lu_solve_numpy(lu_a, piv_a, rhs, trans)
        b = K.lu_solve_numba(lu_a, piv_a, rhs, trans)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_numba_factor_flags_singular_pivot():
    with pytest.raises(K.SingularMatrixError):
        K.lu_factor_numba(np.zeros((1, 3, 3)))
    with pytest.raises(K.SingularMatrixError):
        K.lu_factor_numpy(np.zeros((1, 3, 3)))


@pytest.mark.parametrize("d", [1, 2, 3, 10])
def test_soc_paths_agree(d):
    rng = np.random.default_rng(d)
    x = rng.standard_normal((500, d)) * 3
    g = rng.standard_normal((500, d))
    # include exact boundary and apex rows
    x[0] = 0.0
    if d > 1:
        x[1, 0] = np.linalg.norm(x[1, 1:])
        x[2, 0] = -np.linalg.norm(x[2, 1:])
    assert np.allclose(K.soc_project_numpy(x), K.soc_project_numba(x), rtol=1e-13, atol=1e-14)
    assert np.allclose(K.soc_vjp_numpy(x, g), K.soc_vjp_numba(x, g), rtol=1e-12, atol=1e-13)
