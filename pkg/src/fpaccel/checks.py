"""Invariant suites behind ``fpaccel check``.

Each suite returns a :class:`SuiteResult` with its largest observed errors.
``fault`` names a suite whose comparison gets a deliberate perturbation, so
the failure path can be exercised.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cones as cn
from .acceleration import AccelModel, Anderson, ModelConfig, run
from .conic import extract_solution, split_state
from . import problems as pr
from .training import unrolled_loss

SUITES = ("projection", "gradient", "equivalence", "embedding")


@dataclass
class SuiteResult:
    name: str
    errors: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(self.errors[k] <= self.limits[k] for k in self.limits)

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        out = [f"{status} {self.name} ({self.seconds:.1f}s)"]
        for k in sorted(self.errors):
            out.append(f"    {k}: max error {self.errors[k]:.3e} (limit {self.limits[k]:.1e})")
        return out


def random_cone_vectors(kind, count, rng):
    """``count`` random vectors for a cone of each kind, with scale variety."""
    size = {"zero": 5, "free": 5, "nonneg": 7, "soc": 6, "psd": 4}[kind]
    spec = cn.ConeSpec([(kind, size)])
    scale = np.exp(rng.uniform(-3, 3, size=(count, 1)))
    return spec, rng.standard_normal((count, spec.dim)) * scale


def projection_suite(count=1000, seed=0, fault=False):
    rng = np.random.default_rng(seed)
    res = SuiteResult("projection", limits={"idempotency": 1e-12, "moreau": 1e-10,
                                             "nonexpansive": 1e-12})
    idem = moreau = expand = 0.0
    for kind in cn.KINDS:
        spec, V = random_cone_vectors(kind, count, rng)
        _, W = random_cone_vectors(kind, count, rng)
        P = cn.project_array(spec, V)
        if fault:
            P = P + 1e-6
        PP = cn.project_array(spec, P)
        scale = np.maximum(1.0, np.linalg.norm(V, axis=1))
        idem = max(idem, np.max(np.linalg.norm(PP - P, axis=1) / scale))
        dual = cn.project_array(cn.dual_cone(spec), -V)
        moreau = max(moreau, np.max(np.linalg.norm(V - (P - dual), axis=1) / scale))
        PW = cn.project_array(spec, W)
        gap = np.linalg.norm(P - PW, axis=1) - np.linalg.norm(V - W, axis=1)
        expand = max(expand, np.max(gap / np.maximum(1.0, np.linalg.norm(V - W, axis=1))))
    res.errors = {"idempotency": idem, "moreau": moreau, "nonexpansive": max(expand, 0.0)}
    return res


def _smooth_cone_point(spec, rng, margin=1e-3):
    """A random point at least ``margin`` away from every projection kink."""
    while True:
        v = rng.standard_normal(spec.dim)
        ok = True
        for seg, a, b in spec._plan[0]:
            x = v[a:b]
            if seg.kind == "nonneg":
                ok &= np.min(np.abs(x)) > margin
            elif seg.kind == "soc":
                r = np.linalg.norm(x[1:])
                ok &= abs(r - abs(x[0])) > margin and r > margin
            elif seg.kind == "psd":
                lam = np.linalg.eigvalsh(cn.smat(x, seg.size))
                ok &= np.min(np.abs(lam)) > margin and np.min(np.diff(lam)) > margin
        if ok:
            return v


def _tiny_model_batch(family="lasso", cell="gru", seed=0):
    insts = [pr.generate(family, {"p": 4, "q": 2} if family == "lasso" else None,
                         seed=seed, index=i) for i in range(2)]
    batch = pr.family_batch(family, insts)
    cfg = ModelConfig(batch.iterate_dim, batch.context().shape[1], cell=cell, hidden=3,
                      init_hidden=3, enc_hidden=3, dec_hidden=3, init_act="tanh",
                      enc_act="tanh", dec_act="tanh", weight_scale=1.0,
                      tau_index=batch.tau_index)
    return batch, AccelModel.create(cfg, seed, identity_start=False)


def param_grad_check(model, loss_fn, names=None, eps=1e-6, coords=6, seed=0):
    """Finite-difference check of ``loss_fn(params)`` on a few coordinates per tensor."""
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    P = model.bind(tape)
    grads = tape.backward(loss_fn(P))
    worst = 0.0
    for name in names or model.params:
        base = model.params[name]
        for flat in rng.choice(base.size, size=min(coords, base.size), replace=False):
            saved = base.flat[flat]
            base.flat[flat] = saved + eps
            up = float(loss_fn(model.params))
            base.flat[flat] = saved - eps
            dn = float(loss_fn(model.params))
            base.flat[flat] = saved
            fd = (up - dn) / (2 * eps)
            worst = max(worst, abs(grads[P[name]].flat[flat] - fd) / max(1.0, abs(fd)))
    return worst


def gradient_suite(seed=0, fault=False):
    rng = np.random.default_rng(seed)
    res = SuiteResult("gradient", limits={})
    err = {}

    M = rng.standard_normal((8, 8)) + 8 * np.eye(8)
    fact = ad.lu_factor(M)
    w = rng.standard_normal(8)
    err["lu_solve"] = ad.grad_check(lambda v: ad.sum(ad.solve_with_vjp(fact, v) * w),
                                    rng.standard_normal(8))
    for kind, size in (("nonneg", 6), ("soc", 5), ("psd", 4), ("zero", 3), ("free", 3)):
        spec = cn.ConeSpec([(kind, size)])
        wk = rng.standard_normal(spec.dim)
        pt = _smooth_cone_point(spec, rng)
        err[f"project_{kind}"] = ad.grad_check(lambda v: ad.sum(cn.project(spec, v) * wk), pt)
    x = rng.standard_normal(10)
    x[np.abs(np.abs(x) - 0.3) < 1e-3] += 0.01
    wx = rng.standard_normal(10)
    err["shrinkage"] = ad.grad_check(lambda v: ad.sum(ad.soft_threshold(v, 0.3) * wx), x)

    H, n_in = 4, 3
    xin = rng.standard_normal((2, n_in))
    for cell in ("gru", "lstm"):
        width = H if cell == "gru" else 2 * H
        gates = 3 if cell == "gru" else 4
        Wi = rng.standard_normal((n_in, gates * H)) * 0.5
        Wh = rng.standard_normal((H, gates * H)) * 0.5
        b1 = rng.standard_normal(gates * H) * 0.1
        b2 = rng.standard_normal(gates * H) * 0.1
        wout = rng.standard_normal((2, width))
        if cell == "gru":
            def f(h):
                return ad.sum(ad.gru_cell(xin, h, Wi, Wh, b1, b2) * wout)
        else:
            def f(h):
                return ad.sum(ad.lstm_cell(xin, h, Wi, Wh, b1) * wout)
        err[f"{cell}_cell"] = ad.grad_check(f, rng.standard_normal((2, width)))

    for cell in ("gru", "lstm"):
        batch, model = _tiny_model_batch("lasso", cell, seed)

        def loss(P, batch=batch, model=model):
            return unrolled_loss(model, P, batch, 3)[0]
        err[f"unrolled_loss_{cell}"] = param_grad_check(model, loss, seed=seed)

    if fault:
        err = {k: v + 1e-2 for k, v in err.items()}
    res.errors = err
    res.limits = {k: (1e-5 if k in ("shrinkage",) else 1e-4) for k in err}
    return res


def random_contraction(dim, rng, radius=0.9):
    A = rng.standard_normal((dim, dim))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    b = rng.standard_normal(dim)
    return A, b


def standalone_aa(f, x0, T, memory, reg=1e-10):
    """Textbook type-II AA loop written without the runner or its state object."""
    hist_x, hist_f = [], []
    xs = [x0]
    x = x0
    for _ in range(T):
        fx = f(x)
        hist_x = (hist_x + [x])[-memory:]
        hist_f = (hist_f + [fx])[-memory:]
        k = len(hist_x)
        nxt = fx
        if k > 1:
            G = np.column_stack([a - b for a, b in zip(hist_f, hist_x)])
            H = G.T @ G
            damp = reg * np.trace(H) / k
            if damp > 0:
                w = np.linalg.solve(H + damp * np.eye(k), np.ones(k))
                cand = np.column_stack(hist_f) @ (w / w.sum())
                if np.isfinite(cand).all():
                    nxt = cand
        x = nxt
        xs.append(x)
    return xs


def equivalence_suite(n_maps=20, T=30, seed=0, fault=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_maps):
        dim = int(rng.integers(2, 12))
        A, b = random_contraction(dim, rng)
        x0 = rng.standard_normal(dim)
        memory = int(rng.integers(1, 11))
        ref = standalone_aa(lambda x: A @ x + b, x0, T, memory)
        got = run(lambda X: X @ A.T + b, x0[None], T, Anderson(memory))
        diff = max(np.max(np.abs(g[0] - r)) for g, r in zip(got, ref))
        worst = max(worst, diff + (1e-6 if fault else 0.0))
    return SuiteResult("equivalence", {"aa_runner_vs_standalone": worst},
                       {"aa_runner_vs_standalone": 1e-12})


def cone_solve(family, instances, iters=5000):
    """Plain iterations on the cone form; returns ``(objectives, primal, dual)``."""
    batch = pr.family_batch(family, instances, as_cone=True)
    z = batch.default_iterate()
    for _ in range(iters):
        z = batch.fmap(z)
    p, d = batch.primal_dual(z)
    objs = []
    for k, prob in enumerate(batch.problems):
        sol = extract_solution(prob, split_state(batch, z, k))
        objs.append(float(prob.original()[2] @ sol.x))
    return np.array(objs), np.asarray(p), np.asarray(d)


def embedding_suite(seeds=3, iters=5000, fault=False):
    res = SuiteResult("embedding", limits={})
    for family in pr.FAMILIES:
        insts = [pr.generate(family, seed=s) for s in range(seeds)]
        objs, p, d = cone_solve(family, insts, iters)
        oracle = np.array([pr.oracle_objective(family, i) for i in insts])
        if fault:
            objs = objs * 1.01
        rel = np.abs(objs - oracle) / np.maximum(1.0, np.abs(oracle))
        res.errors[f"{family}_objective"] = float(rel.max())
        res.errors[f"{family}_residuals"] = float(max(p.max(), d.max()))
        res.limits[f"{family}_objective"] = 1e-3
        res.limits[f"{family}_residuals"] = 1e-6
    return res


def run_checks(suites=SUITES, fault=None):
    runners = {
        "projection": projection_suite,
        "gradient": gradient_suite,
        "equivalence": equivalence_suite,
        "embedding": embedding_suite,
    }
    out = []
    for name in suites:
        t0 = time.perf_counter()
        r = runners[name](fault=(fault == name))
        r.seconds = time.perf_counter() - t0
        out.append(r)
    return out
