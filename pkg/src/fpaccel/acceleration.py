"""Accelerated fixed-point runner with plain, Anderson and learned plug-ins.

The runner is the loop

    x_1, h_1 = initial(x_default)
    for t in 1..T:
        x~_{t+1} = f(x_t)
        x_{t+1}, h_{t+1} = update(x_t, x~_{t+1}, h_t)

over row-stacked iterates of shape (B, d). Anderson acceleration is the
instance whose hidden state is the window of past iterates.
"""

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericError

TAU_FLOOR = 1e-6
ABLATIONS = ("none", "hidden", "iterate", "both")
CELLS = ("gru", "lstm")


def run(f, x_default, T, accel=None, observe=None):
    """Run ``T`` accelerated iterations of ``f`` from ``x_default``.

    ``observe(t, x_t, f(x_t))`` is called every iteration; a truthy return
    stops the loop. Returns the iterates ``[x_1, ..., x_{last+1}]``.
    """
    accel = Plain() if accel is None else accel
    x, h = accel.initial(x_default)
    iterates = [x]
    for t in range(1, T + 1):
        xt = f(x)
        stop = observe(t, x, xt) if observe is not None else False
        x, h = accel.update(x, xt, h)
        iterates.append(x)
        if stop:
            break
    return iterates


class Plain:
    def initial(self, x_default):
        return x_default, None

    def update(self, x, x_tilde, h):
        return x_tilde, None


# ---------------------------------------------------------------------------
# Anderson acceleration
# ---------------------------------------------------------------------------


@dataclass
class AAState:
    memory: int
    reg: float = 1e-10
    xs: deque = field(default=None)
    fxs: deque = field(default=None)

    def __post_init__(self):
        if self.memory < 1:
            raise ConfigurationError("AA memory must be >= 1")
        self.xs = deque(maxlen=self.memory)
        self.fxs = deque(maxlen=self.memory)


def aa_weights(G, reg):
    """Affine weights minimizing ``||G alpha||`` with Tikhonov damping.

    ``G`` holds one residual per column. The damping is ``reg`` times the
    mean diagonal of ``G^T G`` so the weights are scale invariant. Returns
    None when the solve degenerates.
    """
    k = G.shape[1]
    GtG = G.T @ G
    lam = reg * np.trace(GtG) / k
    if not np.isfinite(lam) or lam <= 0:
        return None
    try:
        w = np.linalg.solve(GtG + lam * np.eye(k), np.ones(k))
    except np.linalg.LinAlgError:
        return None
    s = w.sum()
    if not np.isfinite(s) or abs(s) < 1e-300:
        return None
    return w / s


def aa_update(state, x, fx):
    """Type-II Anderson step; pushes ``(x, f(x))`` and returns the next iterate."""
    x = np.asarray(x, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    if x.shape != fx.shape:
        raise ConfigurationError("x and f(x) differ in shape")
    state.xs.append(x)
    state.fxs.append(fx)
    if len(state.xs) == 1:
        return fx.copy()
    F = np.stack(state.fxs, axis=1)
    G = F - np.stack(state.xs, axis=1)
    alpha = aa_weights(G, state.reg)
    if alpha is None:
        return fx.copy()
    out = F @ alpha
    if not np.isfinite(out).all():
        return fx.copy()
    return out


class Anderson:
    def __init__(self, memory=10, reg=1e-10):
        self.memory = memory
        self.reg = reg

    def initial(self, x_default):
        x = ad.data_of(x_default)
        return x, [AAState(self.memory, self.reg) for _ in range(x.shape[0])]

    def update(self, x, x_tilde, h):
        out = np.stack([aa_update(s, xi, fi) for s, xi, fi in zip(h, x, x_tilde)])
        return out, h


# ---------------------------------------------------------------------------
# learned initializer and accelerator
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    iterate_dim: int
    context_dim: int
    cell: str = "gru"
    hidden: int = 128
    layers: int = 1
    init_hidden: int = 128
    init_depth: int = 1
    init_act: str = "relu"
    enc_hidden: int = 128
    enc_depth: int = 1
    enc_act: str = "relu"
    dec_hidden: int = 128
    dec_depth: int = 1
    dec_act: str = "relu"
    weight_scale: float = 8.0
    ablation: str = "both"
    # slot divided out of the inputs and frozen in the outputs; -1 disables
    tau_index: int = -1
    # whether the map it was trained on rescales the iterate norm
    scale_iterates: bool = True

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ConfigurationError(f"cell must be one of {CELLS}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}")
        for act in (self.init_act, self.enc_act, self.dec_act):
            if act not in ad.ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ConfigurationError("recurrent cell needs >= 1 layer and hidden units")

    @property
    def state_width(self):
        return self.hidden if self.cell == "gru" else 2 * self.hidden

    @property
    def uses_init_iterate(self):
        return self.ablation in ("iterate", "both")

    @property
    def uses_init_hidden(self):
        return self.ablation in ("hidden", "both")

    def to_dict(self):
        return asdict(self)


def _mlp_shapes(prefix, n_in, width, depth, n_out):
    shapes = []
    for i in range(depth):
        shapes.append((f"{prefix}.l{i}.W", (n_in, width)))
        shapes.append((f"{prefix}.l{i}.b", (width,)))
        n_in = width
    if n_out is not None:
        shapes.append((f"{prefix}.out.W", (n_in, n_out)))
        shapes.append((f"{prefix}.out.b", (n_out,)))
    return shapes, n_in


def param_shapes(cfg):
    """Ordered ``(name, shape)`` list; this order is the checkpoint order."""
    d = cfg.iterate_dim
    shapes = []
    if cfg.ablation != "none":
        n_out = (d if cfg.uses_init_iterate else 0) + (
            cfg.layers * cfg.state_width if cfg.uses_init_hidden else 0
        )
        s, _ = _mlp_shapes("init", cfg.context_dim, cfg.init_hidden, cfg.init_depth, n_out)
        shapes += s
    s, n_in = _mlp_shapes("enc", 2 * d, cfg.enc_hidden, cfg.enc_depth, None)
    shapes += s
    H = cfg.hidden
    gates = 3 if cfg.cell == "gru" else 4
    for layer in range(cfg.layers):
        p = f"cell.{layer}"
        shapes.append((f"{p}.w_ih", (n_in, gates * H)))
        shapes.append((f"{p}.w_hh", (H, gates * H)))
        if cfg.cell == "gru":
            shapes.append((f"{p}.b_ih", (gates * H,)))
            shapes.append((f"{p}.b_hh", (gates * H,)))
        else:
            shapes.append((f"{p}.b", (gates * H,)))
        n_in = H
    s, _ = _mlp_shapes("dec", H, cfg.dec_hidden, cfg.dec_depth, d)
    shapes += s
    return shapes


class AccelModel:
    """Parameters plus architecture of the learned initializer/accelerator."""

    def __init__(self, config, params):
        self.config = config
        expected = param_shapes(config)
        if [k for k, _ in expected] != list(params):
            raise ConfigurationError("parameter names do not match the architecture")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    @classmethod
    def create(cls, config, seed=0, identity_start=True):
        """Random weights; with ``identity_start`` the layers writing into the
        iterate start at zero, so the untrained model reproduces plain iteration
        while still receiving gradients."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config):
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        model = cls(config, params)
        if identity_start:
            model.params["dec.out.W"][...] = 0.0
            if config.uses_init_iterate:
                model.params["init.out.W"][:, :config.iterate_dim] = 0.0
        return model

    def copy(self):
        return AccelModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_decoder(self):
        for k in self.params:
            if k.startswith("dec."):
                self.params[k][...] = 0.0
        return self

    def num_params(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def bind(self, tape):
        return {k: tape.variable(v) for k, v in self.params.items()}


def _mlp(P, prefix, x, depth, act, final=True):
    f = ad.ACTIVATIONS[act]
    for i in range(depth):
        x = f(ad.matmul(x, P[f"{prefix}.l{i}.W"]) + P[f"{prefix}.l{i}.b"])
    if final:
        x = ad.matmul(x, P[f"{prefix}.out.W"]) + P[f"{prefix}.out.b"]
    return x


def _tau_mask(cfg):
    mask = np.ones(cfg.iterate_dim)
    if cfg.tau_index >= 0:
        mask[cfg.tau_index] = 0.0
    return mask


def zero_hidden(cfg, batch_size):
    return [np.zeros((batch_size, cfg.state_width)) for _ in range(cfg.layers)]


def init_apply(model, context, x_default, params=None):
    """Learned ``[x_1, h_1]``; parts disabled by the ablation fall back to defaults."""
    cfg = model.config
    P = model.params if params is None else params
    phi = context
    if ad.data_of(phi).shape[-1] != cfg.context_dim:
        raise ConfigurationError(
            f"context dim {ad.data_of(phi).shape[-1]} != model input {cfg.context_dim}"
        )
    B = ad.data_of(x_default).shape[0]
    if cfg.ablation == "none":
        return x_default, zero_hidden(cfg, B)
    out = _mlp(P, "init", phi, cfg.init_depth, cfg.init_act)
    d = cfg.iterate_dim
    x1 = x_default
    off = 0
    if cfg.uses_init_iterate:
        dx = out[:, :d] * (_tau_mask(cfg) / cfg.weight_scale)
        x1 = x_default + dx
        off = d
    if cfg.uses_init_hidden:
        w = cfg.state_width
        h1 = [out[:, off + i * w: off + (i + 1) * w] for i in range(cfg.layers)]
    else:
        h1 = zero_hidden(cfg, B)
    return x1, h1


def acc_apply(model, x_t, x_tilde, h, params=None):
    """Residual correction of ``x_tilde`` from the recurrent accelerator."""
    cfg = model.config
    P = model.params if params is None else params
    if ad.data_of(x_t).shape[-1] != cfg.iterate_dim or ad.data_of(x_tilde).shape != ad.data_of(
        x_t
    ).shape:
        raise ConfigurationError("iterate dims do not match the model")
    if cfg.tau_index >= 0:
        k = cfg.tau_index
        tau_t = ad.maximum(x_t[:, k:k + 1], TAU_FLOOR)
        tau_n = ad.maximum(x_tilde[:, k:k + 1], TAU_FLOOR)
        a, b = x_t / tau_t, x_tilde / tau_n
    else:
        a, b = x_t, x_tilde
    inp = _mlp(P, "enc", ad.concat([a, b], axis=-1), cfg.enc_depth, cfg.enc_act, final=False)
    new_h = []
    H = cfg.hidden
    for layer in range(cfg.layers):
        p = f"cell.{layer}"
        if cfg.cell == "gru":
            hl = ad.gru_cell(inp, h[layer], P[f"{p}.w_ih"], P[f"{p}.w_hh"], P[f"{p}.b_ih"], P[f"{p}.b_hh"])
            inp = hl
        else:
            hl = ad.lstm_cell(inp, h[layer], P[f"{p}.w_ih"], P[f"{p}.w_hh"], P[f"{p}.b"])
            inp = hl[:, :H]
        new_h.append(hl)
    delta = _mlp(P, "dec", inp, cfg.dec_depth, cfg.dec_act)
    if cfg.tau_index >= 0:
        delta = delta * (_tau_mask(cfg) / cfg.weight_scale) * tau_n
    else:
        delta = delta * (1.0 / cfg.weight_scale)
    x_next = x_tilde + delta
    if not np.isfinite(ad.data_of(x_next)).all():
        raise NumericError("non-finite accelerator output")
    return x_next, new_h


class Neural:
    def __init__(self, model, context, params=None):
        self.model = model
        self.context = context
        self.params = params

    def initial(self, x_default):
        return init_apply(self.model, self.context, x_default, self.params)

    def update(self, x, x_tilde, h):
        return acc_apply(self.model, x, x_tilde, h, self.params)


def make_accel(kind, memory=10, model=None, context=None, params=None):
    if kind in ("none", "plain"):
        return Plain()
    if kind == "aa":
        return Anderson(memory)
    if kind == "neural":
        if model is None or context is None:
            raise ConfigurationError("neural acceleration needs a model and a context")
        return Neural(model, context, params)
    raise ConfigurationError(f"unknown accelerator {kind!r}")
