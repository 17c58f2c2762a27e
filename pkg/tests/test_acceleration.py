import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpaccel import autodiff as ad
from fpaccel import problems as pr
from fpaccel.acceleration import (
    AAState, AccelModel, Anderson, ModelConfig, Neural, Plain, aa_update, acc_apply, init_apply,
    param_shapes, run, zero_hidden,
)
from fpaccel.checks import equivalence_suite, param_grad_check, random_contraction, standalone_aa
from fpaccel.errors import ConfigurationError


def small_model(batch, ablation="both", cell="gru", seed=0, identity_start=False, **kw):
    cfg = ModelConfig(batch.iterate_dim, batch.context().shape[1], cell=cell, hidden=4,
                      init_hidden=5, enc_hidden=5, dec_hidden=5, init_act="tanh", enc_act="tanh",
                      dec_act="tanh", weight_scale=2.0, ablation=ablation, tau_index=batch.tau_index,
                      **kw)
    return AccelModel.create(cfg, seed, identity_start=identity_start)


@pytest.fixture(scope="module")
def batch():
    return pr.family_batch("lasso", [pr.generate("lasso", {"p": 5, "q": 3}, seed=0, index=i)
                                     for i in range(3)])


# --- Anderson ------------------------------------------------------------------


def test_window_of_one_returns_map_value():
    st_ = AAState(memory=1)
    rng = np.random.default_rng(0)
    for _ in range(4):
        x, fx = rng.standard_normal((2, 5))
        assert np.array_equal(aa_update(st_, x, fx), fx)


@pytest.mark.parametrize("dim", [2, 5, 8])
def test_linear_map_solved_in_dim_plus_one_steps(dim):
    rng = np.random.default_rng(dim)
    A, b = random_contraction(dim, rng, radius=0.8)
    xstar = np.linalg.solve(np.eye(dim) - A, b)
    # the default damping (1e-10) biases the weights by about that much relative
    # to the squared conditioning; exactness is a property of the undamped method
    st_ = AAState(memory=dim + 1, reg=1e-16)
    x = rng.standard_normal(dim)
    for _ in range(dim + 1):
        x = aa_update(st_, x, A @ x + b)
    assert np.linalg.norm(x - xstar) <= 1e-8 * max(1.0, np.linalg.norm(xstar))


def test_duplicate_history_stays_finite():
    st_ = AAState(memory=5)
    x = np.array([1.0, 2.0])
    for _ in range(6):
        out = aa_update(st_, x, x + 1.0)
        assert np.isfinite(out).all()


def test_degenerate_solve_falls_back_to_map_value():
    st_ = AAState(memory=3)
    x = np.array([1.0, 2.0])
    aa_update(st_, x, x)
    # a zero residual history makes the damped normal equations degenerate
    assert np.array_equal(aa_update(st_, x, x), x)


def test_memory_must_be_positive():
    with pytest.raises(ConfigurationError):
        AAState(memory=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 10), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_runner_with_aa_equals_standalone_loop(dim, memory, seed):
    rng = np.random.default_rng(seed)
    A, b = random_contraction(dim, rng)
    x0 = rng.standard_normal(dim)
    ref = standalone_aa(lambda x: A @ x + b, x0, 25, memory)
    got = run(lambda X: X @ A.T + b, x0[None], 25, Anderson(memory))
    for g, r in zip(got, ref):
        assert np.max(np.abs(g[0] - r)) <= 1e-12


def test_equivalence_suite_and_fault():
    assert equivalence_suite().passed
    assert not equivalence_suite(n_maps=2, fault=True).passed


def test_plain_runner_repeats_map():
    rng = np.random.default_rng(1)
    A, b = random_contraction(4, rng)
    x = rng.standard_normal((1, 4))
    xs = run(lambda X: X @ A.T + b, x, 10, Plain())
    ref = x
    for k in range(1, 11):
        ref = ref @ A.T + b
        assert np.array_equal(xs[k], ref)


def test_observer_can_stop_early():
    xs = run(lambda X: X * 0.5, np.ones((1, 2)), 10, observe=lambda t, x, xt: t == 3)
    assert len(xs) == 4


# --- learned model ---------------------------------------------------------------------


def test_param_shapes_follow_ablation(batch):
    d = batch.iterate_dim
    for mode, n_out in (("both", d + 4), ("iterate", d), ("hidden", 4)):
        shapes = dict(param_shapes(small_model(batch, mode).config))
        assert shapes["init.out.W"][1] == n_out
        assert shapes["dec.out.W"][1] == d
    assert "init.out.W" not in dict(param_shapes(small_model(batch, "none").config))
    lstm = dict(param_shapes(small_model(batch, "hidden", cell="lstm").config))
    assert lstm["init.out.W"][1] == 8


def test_ablation_none_returns_default_start(batch):
    m = small_model(batch, "none")
    x, h = init_apply(m, batch.context(), batch.default_iterate())
    assert np.array_equal(x, batch.default_iterate())
    assert all(np.array_equal(a, b) for a, b in zip(h, zero_hidden(m.config, len(batch))))


def test_zero_weight_network_outputs_biases_only(batch):
    m = small_model(batch, "both")
    for k in m.params:
        if k.endswith(".W"):
            m.params[k][...] = 0.0
    m.params["init.out.b"][...] = np.linspace(-1, 1, m.params["init.out.b"].size)
    x1, h1 = init_apply(m, batch.context(), batch.default_iterate())
    ctx = np.random.default_rng(0).standard_normal(batch.context().shape)
    x2, h2 = init_apply(m, ctx, batch.default_iterate())
    assert np.array_equal(x1, x2) and np.array_equal(h1[0], h2[0])
    # the tau slot is never moved by the model
    assert np.array_equal(x1[:, batch.tau_index], batch.default_iterate()[:, batch.tau_index])


def test_init_gradient_matches_finite_differences(batch):
    m = small_model(batch, "both")
    ctx, xd = batch.context(), batch.default_iterate()

    def loss(P):
        x, _ = init_apply(m, ctx, xd, P)
        return ad.sum(x * x)

    assert param_grad_check(m, loss, names=["init.l0.W", "init.out.W", "init.out.b"]) <= 1e-6


def test_zero_decoder_is_identity(batch):
    m = small_model(batch).zero_decoder()
    rng = np.random.default_rng(2)
    x = batch.default_iterate() + 0.1 * rng.random((3, batch.iterate_dim))
    xt = batch.fmap(x)
    h = zero_hidden(m.config, 3)
    out, h2 = acc_apply(m, x, xt, h)
    assert np.array_equal(out, xt)
    out2, _ = acc_apply(m, xt, batch.fmap(xt), h2)
    assert not np.array_equal(h2[0], h[0])


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_unrolled_cell_gradient(batch, cell):
    m = small_model(batch, "hidden", cell=cell, layers=2)
    ctx, xd = batch.context(), batch.default_iterate()

    def loss(P):
        xs = run(batch.fmap, xd, 3, Neural(m, ctx, P))
        return ad.sum(batch.residual(xs[-2], batch.fmap(xs[-2])))

    names = [k for k in m.params if k.startswith("cell.")]
    assert param_grad_check(m, loss, names=names) <= 1e-4


def test_identity_start_reproduces_plain_trace(batch):
    m = small_model(batch, "both", identity_start=True)
    xd = batch.default_iterate()
    neural = run(batch.fmap, xd, 15, Neural(m, batch.context()))
    plain = run(batch.fmap, xd, 15, Plain())
    for a, b in zip(neural, plain):
        assert np.array_equal(ad.data_of(a), b)


def test_zero_decoder_differs_from_plain_only_through_start(batch):
    m = small_model(batch, "iterate").zero_decoder()
    neural = run(batch.fmap, batch.default_iterate(), 10, Neural(m, batch.context()))
    plain = run(batch.fmap, neural[0], 9, Plain())
    assert not np.array_equal(neural[0], batch.default_iterate())
    for a, b in zip(neural, plain):
        assert np.array_equal(a, b)


def test_model_without_tau_index_can_move_tau(batch):
    m = small_model(batch, "iterate")
    m.config.tau_index = -1
    x, _ = init_apply(m, batch.context(), batch.default_iterate())
    assert not np.array_equal(x[:, batch.tau_index], batch.default_iterate()[:, batch.tau_index])


def test_neural_runs_are_deterministic(batch):
    a = run(batch.fmap, batch.default_iterate(), 8, Neural(small_model(batch, seed=3), batch.context()))
    b = run(batch.fmap, batch.default_iterate(), 8, Neural(small_model(batch, seed=3), batch.context()))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_config_validation(batch):
    with pytest.raises(ConfigurationError):
        small_model(batch, cell="rnn")
    with pytest.raises(ConfigurationError):
        small_model(batch, ablation="half")
    m = small_model(batch)
    with pytest.raises(ConfigurationError):
        init_apply(m, np.zeros((3, 2)), batch.default_iterate())
    with pytest.raises(ConfigurationError):
        AccelModel(m.config, {k: v for k, v in list(m.params.items())[1:]})


def test_ista_family_model(batch):
    en = pr.family_batch("elastic_net", [pr.generate("elastic_net", seed=0, index=i) for i in range(2)])
    m = small_model(en, "both")
    assert m.config.tau_index == -1
    xs = run(en.fmap, en.default_iterate(), 5, Neural(m, en.context()))
    assert xs[-1].shape == (2, 25) and np.isfinite(xs[-1]).all()
