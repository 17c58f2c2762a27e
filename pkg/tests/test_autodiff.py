import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpaccel import autodiff as ad
from fpaccel.errors import ConfigurationError, NumericError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_forward_small_cases():
    t = ad.Tape()
    v = t.variable([1.0, 2.0, 3.0])
    assert np.array_equal(ad.data_of(ad.matvec(np.eye(3), v)), [1, 2, 3])
    assert np.array_equal(ad.data_of(ad.add(t.variable([1.0, 2.0]), [3.0, 4.0])), [4, 6])
    assert float(ad.data_of(ad.norm2(t.variable([3.0, 4.0])))) == 5.0


def test_backward_square_and_norm():
    t = ad.Tape()
    x = t.variable(3.0)
    assert t.backward(x * x)[x] == pytest.approx(6.0)
    t = ad.Tape()
    x = t.variable([3.0, 4.0])
    assert np.allclose(t.backward(ad.norm2(x))[x], [0.6, 0.8])


def test_adjoints_accumulate_over_consumers():
    t = ad.Tape()
    x = t.variable([1.0, -2.0])
    g = t.backward(ad.sum(x + x))[x]
    assert np.array_equal(g, [2.0, 2.0])


def test_backward_visits_nodes_in_reverse_order():
    t = ad.Tape()
    x = t.variable(2.0)
    seen = []

    def tagged(v, tag):
        return ad.custom_op(tag, ad.data_of(v), (v,), lambda g: (seen.append(tag) or g,))

    y = tagged(tagged(tagged(x, "a"), "b"), "c")
    t.backward(y)
    assert seen == ["c", "b", "a"]


def test_non_finite_values_are_rejected():
    t = ad.Tape()
    with pytest.raises(NumericError):
        ad.div(t.variable([1.0]), 0.0)
    with pytest.raises(NumericError):
        t.variable([np.nan])


def test_seed_required_for_vector_output():
    t = ad.Tape()
    x = t.variable([1.0, 2.0])
    with pytest.raises(ConfigurationError):
        t.backward(x * 2.0)
    assert np.array_equal(t.backward(x * 2.0, seed=[1.0, 3.0])[x], [2.0, 6.0])


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 5))
    H = M @ M.T
    err = ad.grad_check(lambda v: ad.sum(v * ad.matvec(H, v)), rng.standard_normal(5))
    assert err <= 1e-7


@pytest.mark.parametrize("name", ["tanh", "sigmoid", "elu"])
def test_smooth_activations_match_finite_differences(name):
    rng = np.random.default_rng(1)
    w = rng.standard_normal(7)
    f = ad.ACTIVATIONS[name]
    x = rng.standard_normal(7)
    x[np.abs(x) < 1e-3] += 0.01  # elu kink at 0
    assert ad.grad_check(lambda v: ad.sum(f(v) * w), x) <= 1e-5


def test_composite_chain_gradient():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 3))
    B = rng.standard_normal((3, 2))
    w = rng.standard_normal(4)

    def f(v):
        X = ad.reshape(v, (3, 2))
        Y = ad.matmul(A, ad.tanh(X) * B)
        z = ad.concat([ad.sum(Y, axis=1), ad.norm2(Y, axis=1)], axis=-1)
        return ad.sum(ad.getitem(z, slice(0, 4)) * w) + ad.mean(ad.relu(z) / (1.0 + ad.sigmoid(z)))

    assert ad.grad_check(f, rng.standard_normal(6)) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_elementwise_ops_match_finite_differences(x, w):
    x = x + np.where(np.abs(x) < 1e-2, 0.05, 0.0)
    assert ad.grad_check(lambda v: ad.sum(ad.tanh(v) * v * w + ad.sub(v, 1.0) * 0.5), x) <= 1e-5


def test_matvec_and_rmatvec_gradients_batched():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((2, 4, 3))
    w = rng.standard_normal((2, 4))
    wr = rng.standard_normal((2, 3))
    x = rng.standard_normal((2, 3))
    assert ad.grad_check(lambda v: ad.sum(ad.matvec(M, v) * w), x) <= 1e-6
    assert ad.grad_check(lambda v: ad.sum(ad.rmatvec(M, v) * wr), w) <= 1e-6
    # gradient with respect to the matrix itself
    assert ad.grad_check(lambda m: ad.sum(ad.matvec(ad.reshape(m, (2, 4, 3)), x) * w), M.ravel()) <= 1e-6


def test_shrinkage_values_and_mask():
    assert np.array_equal(ad.soft_threshold(np.array([0.5, -2.0]), 1.0), [0.0, -1.0])
    x = np.array([0.3, -1.7, 2.5, 0.0])
    assert np.array_equal(ad.soft_threshold(x, 0.0), x)
    t = ad.Tape()
    v = t.variable([0.5, -2.0, 1.0, 1.5])
    g = t.backward(ad.sum(ad.soft_threshold(v, 1.0)))[v]
    assert np.array_equal(g, [0.0, 1.0, 0.0, 1.0])


def test_shrinkage_gradient_away_from_threshold():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(20)
    x[np.abs(np.abs(x) - 0.4) < 1e-3] += 0.01
    w = rng.standard_normal(20)
    assert ad.grad_check(lambda v: ad.sum(ad.soft_threshold(v, 0.4) * w), x) <= 1e-6


# --- linear solves ---------------------------------------------------------


def test_lu_small_cases():
    f = ad.lu_factor(np.eye(3))
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(ad.lu_solve(f, v), v)
    f = ad.lu_factor(np.diag([2.0, 4.0]))
    assert np.allclose(ad.lu_solve(f, np.array([2.0, 4.0])), [1.0, 1.0])


@pytest.mark.parametrize("cond", [1e1, 1e3, 1e6])
def test_lu_residual_for_conditioned_matrices(cond):
    rng = np.random.default_rng(5)
    U, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    V, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    M = U @ np.diag(np.geomspace(1.0, 1.0 / cond, 10)) @ V.T
    v = rng.standard_normal(10)
    u = ad.lu_solve(ad.lu_factor(M), v)
    assert np.linalg.norm(M @ u - v) <= 1e-10 * np.linalg.norm(v)
    ut = ad.lu_solve(ad.lu_factor(M), v, trans=True)
    assert np.linalg.norm(M.T @ ut - v) <= 1e-10 * np.linalg.norm(v)


def test_lu_batched_matches_single():
    rng = np.random.default_rng(6)
    Ms = rng.standard_normal((3, 6, 6)) + 6 * np.eye(6)
    V = rng.standard_normal((3, 6))
    got = ad.lu_solve(ad.lu_factor(Ms), V)
    for k in range(3):
        assert np.array_equal(got[k], ad.lu_solve(ad.lu_factor(Ms[k]), V[k]))


def test_singular_matrix_is_a_numeric_error():
    with pytest.raises(NumericError):
        ad.lu_factor(np.zeros((3, 3)))
    with pytest.raises(ConfigurationError):
        ad.lu_factor(np.zeros((3, 2)))


def test_solve_vjp_small_cases():
    for M, expect in ((2 * np.eye(2), [0.5, 0.0]), (np.eye(2), [1.0, 0.0])):
        t = ad.Tape()
        v = t.variable([1.0, 1.0])
        u = ad.solve_with_vjp(ad.lu_factor(M), v)
        assert np.allclose(t.backward(u, seed=[1.0, 0.0])[v], expect)


def test_solve_vjp_matches_finite_differences():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((8, 8)) + 4 * np.eye(8)
    f = ad.lu_factor(M)
    w = rng.standard_normal(8)
    assert ad.grad_check(lambda v: ad.sum(ad.solve_with_vjp(f, v) * w), rng.standard_normal(8)) <= 1e-5


# --- recurrent cells -------------------------------------------------------


def _cell_params(rng, n_in, H, gates):
    return (rng.standard_normal((n_in, gates * H)) * 0.5, rng.standard_normal((H, gates * H)) * 0.5,
            rng.standard_normal(gates * H) * 0.1, rng.standard_normal(gates * H) * 0.1)


def test_gru_cell_against_reference_formula():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3))
    h = rng.standard_normal((2, 4))
    Wi, Wh, bi, bh = _cell_params(rng, 3, 4, 3)
    got = ad.gru_cell(x, h, Wi, Wh, bi, bh)
    gi = x @ Wi + bi
    gh = h @ Wh + bh
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    r = sig(gi[:, :4] + gh[:, :4])
    z = sig(gi[:, 4:8] + gh[:, 4:8])
    n = np.tanh(gi[:, 8:] + r * gh[:, 8:])
    assert np.allclose(got, (1 - z) * n + z * h, atol=1e-14)


def test_lstm_cell_against_reference_formula():
    rng = np.random.default_rng(9)
    H = 4
    x = rng.standard_normal((2, 3))
    hc = rng.standard_normal((2, 2 * H))
    Wi, Wh, b, _ = _cell_params(rng, 3, H, 4)
    got = ad.lstm_cell(x, hc, Wi, Wh, b)
    h, c = hc[:, :H], hc[:, H:]
    g = x @ Wi + h @ Wh + b
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    i, f, gg, o = sig(g[:, :H]), sig(g[:, H:2 * H]), np.tanh(g[:, 2 * H:3 * H]), sig(g[:, 3 * H:])
    c2 = f * c + i * gg
    assert np.allclose(got, np.concatenate([o * np.tanh(c2), c2], axis=1), atol=1e-14)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_cell_gradients_for_every_argument(cell):
    rng = np.random.default_rng(10)
    H, n_in = 3, 2
    gates = 3 if cell == "gru" else 4
    width = H if cell == "gru" else 2 * H
    x = rng.standard_normal((2, n_in))
    h = rng.standard_normal((2, width))
    Wi, Wh, bi, bh = _cell_params(rng, n_in, H, gates)
    w = rng.standard_normal((2, width))

    def call(x_, h_, Wi_, Wh_, bi_, bh_):
        if cell == "gru":
            return ad.gru_cell(x_, h_, Wi_, Wh_, bi_, bh_)
        return ad.lstm_cell(x_, h_, Wi_, Wh_, bi_)

    args = [x, h, Wi, Wh, bi, bh]
    for k in range(6 if cell == "gru" else 5):
        def f(v, k=k):
            a = list(args)
            a[k] = ad.reshape(v, args[k].shape) if hasattr(v, "tape") else v.reshape(args[k].shape)
            return ad.sum(call(*a) * w)
        assert ad.grad_check(f, args[k].ravel()) <= 1e-6
