"""Meta-training of the learned initializer and accelerator by unrolling."""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .acceleration import ABLATIONS, AccelModel, ModelConfig, acc_apply, init_apply
from .errors import ConfigurationError, NumericError
from .trace import SolveConfig, initial_residual, solve

METRICS_HEADER = "update,train_loss,val_loss,lr,grad_norm"


@dataclass
class TrainConfig:
    family: str = "lasso"
    T: int = 50
    batch_size: int = 16
    updates: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    cosine: bool = False
    max_grad_norm: float = 10.0
    lam: float = 0.0
    tau_norm: bool = True
    scale_iterates: bool = True
    ablation: str = "both"
    eval_every: int = 100
    seed: int = 0
    cell: str = "gru"
    hidden: int = 128
    layers: int = 1
    mlp_hidden: int = 128
    mlp_depth: int = 1
    activation: str = "relu"
    weight_scale: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if self.T < 1 or self.batch_size < 1 or self.updates < 0:
            raise ConfigurationError("T and batch size must be >= 1, updates >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}")
        if self.max_grad_norm <= 0 or self.lr <= 0:
            raise ConfigurationError("learning rate and clip norm must be positive")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


def model_config_for(batch, tcfg, **overrides):
    """Architecture matching a family batch and the training switches.

    Without tau normalization the model sees and may change the raw ``tau``.
    """
    kw = dict(
        cell=tcfg.cell,
        hidden=tcfg.hidden,
        layers=tcfg.layers,
        weight_scale=tcfg.weight_scale,
    )
    for part in ("init", "enc", "dec"):
        kw[f"{part}_hidden"] = tcfg.mlp_hidden
        kw[f"{part}_depth"] = tcfg.mlp_depth
        kw[f"{part}_act"] = tcfg.activation
    kw.update(overrides)
    return ModelConfig(
        iterate_dim=batch.iterate_dim,
        context_dim=batch.context().shape[1],
        ablation=tcfg.ablation,
        tau_index=batch.tau_index if tcfg.tau_norm else -1,
        scale_iterates=tcfg.scale_iterates,
        **kw,
    )


def unrolled_loss(model, params, batch, T, lam=0.0, tau_norm=True, r0=None):
    """Batch mean of ``(1 - lam) sum_t R(x_t) / R0 + lam ||(p, d)(x_T)||``.

    ``params`` may be taped tensors (training) or plain arrays (validation).
    ``R0`` is a constant per instance. Returns ``(loss, per_instance)``.
    """
    if lam > 0 and not batch.has_primal_dual:
        raise ConfigurationError("lambda > 0 needs primal/dual residuals")
    r0 = initial_residual(batch, tau_norm) if r0 is None else r0
    x_def = batch.default_iterate()
    x, h = init_apply(model, batch.context(), x_def, params)
    fp_sum = 0.0
    for t in range(1, T + 1):
        xt = batch.fmap(x)
        r = batch.residual(x, xt, tau_norm)
        fp_sum = r / r0 + fp_sum
        if t < T:
            x, h = acc_apply(model, x, xt, h, params)
    per = fp_sum
    if lam > 0:
        p, d = batch.primal_dual(x)
        pd = ad.norm2(ad.concat([ad.reshape(p, (-1, 1)), ad.reshape(d, (-1, 1))], axis=-1))
        per = per * (1.0 - lam) + pd * lam if lam < 1 else pd
    loss = ad.mean(per)
    data = ad.data_of(loss)
    if not np.isfinite(data):
        bad = np.nonzero(~np.isfinite(ad.data_of(per)))[0]
        raise NumericError(f"non-finite loss (instances {bad.tolist()})")
    return loss, ad.data_of(per)


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(cfg, update):
    if not cfg.cosine or cfg.updates == 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(update, cfg.updates) / cfg.updates))


def adam_step(opt, params, grads, lr, beta1=0.9, beta2=0.99, eps=1e-8):
    """Bias-corrected Adam; updates ``params`` and ``opt`` in place."""
    opt.step += 1
    c1 = 1.0 - beta1 ** opt.step
    c2 = 1.0 - beta2 ** opt.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigurationError(f"{k}: gradient shape {g.shape} != {p.shape}")
        opt.m[k] = beta1 * opt.m[k] + (1.0 - beta1) * g
        opt.v[k] = beta2 * opt.v[k] + (1.0 - beta2) * g * g
        p -= lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + eps)
    return params


def global_norm(grads):
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_gradients(grads, max_norm):
    if max_norm <= 0:
        raise ConfigurationError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def loss_and_grads(model, batch, cfg, r0=None):
    tape = ad.Tape()
    P = model.bind(tape)
    loss, _ = unrolled_loss(model, P, batch, cfg.T, cfg.lam, cfg.tau_norm, r0)
    g = tape.backward(loss)
    return float(ad.data_of(loss)), {k: g[t] for k, t in P.items()}


def validation_loss(model, batch, cfg, r0=None):
    loss, _ = unrolled_loss(model, model.params, batch, cfg.T, cfg.lam, cfg.tau_norm, r0)
    return float(loss)


def train(cfg, train_batch, val_batch, model=None, arch=None, log=None):
    """Adam on the unrolled loss; keeps the checkpoint with the best validation loss.

    Returns ``(best_model, rows)`` where rows follow :data:`METRICS_HEADER`.
    The zero-update model is validated first, so the result never scores
    worse on validation than the starting point.
    """
    if model is None:
        mcfg = model_config_for(train_batch, cfg, **(arch or {}))
        model = AccelModel.create(mcfg, cfg.seed)
    model = model.copy()
    train_batch = train_batch.with_scaling(cfg.scale_iterates)
    val_batch = val_batch.with_scaling(cfg.scale_iterates)
    rng = np.random.default_rng([cfg.seed, 7])
    opt = OptState.zeros_like(model.params)
    r0_train = initial_residual(train_batch, cfg.tau_norm)
    r0_val = initial_residual(val_batch, cfg.tau_norm)
    best = validation_loss(model, val_batch, cfg, r0_val)
    best_model = model.copy()
    rows = [(0, float("nan"), best, learning_rate(cfg, 0), float("nan"))]
    if log:
        log(rows[-1])
    n = len(train_batch)
    k = min(cfg.batch_size, n)
    for u in range(1, cfg.updates + 1):
        idx = np.sort(rng.choice(n, size=k, replace=False))
        sub = train_batch.subset(idx)
        loss, grads = loss_and_grads(model, sub, cfg, r0_train[idx])
        grads, gnorm = clip_gradients(grads, cfg.max_grad_norm)
        lr = learning_rate(cfg, u - 1)
        adam_step(opt, model.params, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
        for name, p in model.params.items():
            if not np.isfinite(p).all():
                raise NumericError(f"non-finite parameter {name} after update {u}")
        if u % cfg.eval_every == 0 or u == cfg.updates:
            val = validation_loss(model, val_batch, cfg, r0_val)
            rows.append((u, loss, val, lr, gnorm))
            if log:
                log(rows[-1])
            if val < best:
                best = val
                best_model = model.copy()
    return best_model, rows


def metrics_csv(rows):
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join(str(r[0]) if i == 0 else ("%.17g" % v) for i, v in enumerate(r)))
    return "\n".join(lines) + "\n"


def evaluate(model, batch, T=50, memory=None):
    """Traces for plain, Anderson, and learned acceleration on ``batch``.

    All three run on the map the model was trained against.
    """
    batch = batch.with_scaling(model.config.scale_iterates)
    out = {}
    for kind in ("none", "aa", "neural"):
        cfg = SolveConfig(max_iters=T, accel=kind, memory=memory)
        out[kind] = solve(batch, cfg, model if kind == "neural" else None)
    return out
