"""Problem distributions, their cone embeddings, and the ISTA map.

Families: lasso, robust PCA (``rpca``), robust Kalman filtering (``kalman``)
and elastic net (``elastic_net``, solved with ISTA). Each generator is a pure
function of its size parameters and an integer seed.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import autodiff as ad
from . import cones as cn
from .conic import DEFAULT_EQUIL_ITERS, ConicProblem, ProblemBatch, equilibrate
from .errors import ConfigurationError

FAMILIES = ("lasso", "rpca", "kalman", "elastic_net")

DESK_SIZES = {
    "lasso": {"p": 20, "q": 10},
    "rpca": {"p": 8, "q": 3, "r": 1},
    "kalman": {"n": 6, "T": 8.0},
    "elastic_net": {"m": 25, "n": 25},
}

FULL_SIZES = {
    "lasso": {"p": 100, "q": 50},
    "rpca": {"p": 30, "q": 3, "r": 2},
    "kalman": {"n": 50, "T": 12.0},
    "elastic_net": {"m": 25, "n": 25},
}


@dataclass
class GeneratorConfig:
    family: str
    sizes: dict = field(default_factory=dict)
    seed: int = 0
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        self.sizes = {**DESK_SIZES[self.family], **self.sizes}
        validate_sizes(self.family, self.sizes)

    def counts(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def validate_sizes(family, sizes):
    def need(cond, msg):
        if not cond:
            raise ConfigurationError(f"{family}: {msg}")

    if family == "lasso":
        need(sizes["p"] >= 1 and sizes["q"] >= 1, "p, q must be >= 1")
    elif family == "rpca":
        need(sizes["p"] >= 1 and sizes["q"] >= 1, "p, q must be >= 1")
        need(1 <= sizes["r"] <= min(sizes["p"], sizes["q"]), "need 1 <= r <= min(p, q)")
    elif family == "kalman":
        need(sizes["n"] >= 2 and sizes["T"] > 0, "need n >= 2 time steps and T > 0")
    elif family == "elastic_net":
        need(sizes["m"] >= 1 and sizes["n"] >= 1, "m, n must be >= 1")


_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


def instance_rng(seed, split="train", index=0):
    return np.random.default_rng([int(seed), _SPLIT_CODE[split], int(index)])


# ---------------------------------------------------------------------------
# lasso
# ---------------------------------------------------------------------------


@dataclass
class LassoInstance:
    problem: ConicProblem
    F: np.ndarray
    g: np.ndarray
    mu: float


def _l1_least_squares_cone(F, g, mu_l1):
    """Cone form of ``1/2 ||F z - g||^2 + mu_l1 ||z||_1``.

    Variables ``[z, w, r, t]``; |z| <= w, ||F z - g|| <= r, r^2 / 2 <= t.
    """
    p, q = F.shape
    n = 2 * q + 2
    iz, iw, ir, it = slice(0, q), slice(q, 2 * q), 2 * q, 2 * q + 1
    m = 2 * q + (p + 1) + 3
    A = np.zeros((m, n))
    b = np.zeros(m)
    eye = np.eye(q)
    A[:q, iz], A[:q, iw] = eye, -eye
    A[q:2 * q, iz], A[q:2 * q, iw] = -eye, -eye
    o = 2 * q
    A[o, ir] = -1.0
    A[o + 1:o + 1 + p, iz] = -F
    b[o + 1:o + 1 + p] = -g
    o += p + 1
    A[o, it], b[o] = -1.0, 1.0
    A[o + 1, it], b[o + 1] = -1.0, -1.0
    A[o + 2, ir] = -np.sqrt(2.0)
    c = np.zeros(n)
    c[iw] = mu_l1
    c[it] = 1.0
    spec = cn.ConeSpec([("nonneg", 2 * q), ("soc", p + 1), ("soc", 3)])
    return ConicProblem(A, b, c, spec)


def gen_lasso(p=20, q=10, seed=0, split="train", index=0, mu_scale=0.1):
    """Lasso with ``F`` of shape (p, q): p observations of q coefficients."""
    validate_sizes("lasso", {"p": p, "q": q})
    rng = instance_rng(seed, split, index)
    F = rng.standard_normal((p, q))
    z = rng.standard_normal(q)
    n_zero = int(round(0.9 * q))
    z[rng.permutation(q)[:n_zero]] = 0.0
    g = F @ z + 0.1 * rng.standard_normal(p)
    mu = mu_scale * np.max(np.abs(F.T @ g))
    return LassoInstance(_l1_least_squares_cone(F, g, mu), F, g, mu)


def lasso_objective(F, g, mu, z):
    r = F @ z - g
    return 0.5 * r @ r + mu * np.sum(np.abs(z))


def lasso_cd(F, g, mu, tol=1e-14, max_sweeps=100000):
    """Cyclic coordinate descent for the lasso."""
    q = F.shape[1]
    z = np.zeros(q)
    col = np.sum(F * F, axis=0)
    r = g.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(q):
            if col[j] == 0:
                continue
            zj = z[j]
            rho = F[:, j] @ r + col[j] * zj
            new = np.sign(rho) * max(abs(rho) - mu, 0.0) / col[j]
            if new != zj:
                r -= F[:, j] * (new - zj)
                z[j] = new
                delta = max(delta, abs(new - zj))
        if delta < tol:
            break
    return z


# ---------------------------------------------------------------------------
# robust PCA
# ---------------------------------------------------------------------------


@dataclass
class RpcaInstance:
    problem: ConicProblem
    M: np.ndarray
    mu: float
    L_true: np.ndarray
    S_true: np.ndarray


def _rpca_cone(M, mu):
    """``min ||L||_*  s.t. ||S||_1 <= mu, L + S = M`` via one PSD block.

    Variables ``[svec(Z), S, T]`` with ``Z = [[W1, L], [L^T, W2]] >= 0`` and
    objective ``tr(Z) / 2``.
    """
    p, q = M.shape
    s = p + q
    nz = s * (s + 1) // 2
    pq = p * q
    n = nz + 2 * pq
    iS = nz + np.arange(pq)
    iT = nz + pq + np.arange(pq)
    ti, tj = np.triu_indices(s)
    pos = {(i, j): k for k, (i, j) in enumerate(zip(ti, tj))}
    m = pq + (2 * pq + 1) + nz
    A = np.zeros((m, n))
    b = np.zeros(m)
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for i in range(p):
        for j in range(q):
            row = i * q + j
            A[row, pos[(i, p + j)]] = inv_sqrt2
            A[row, iS[row]] = 1.0
            b[row] = M[i, j]
    o = pq
    A[o + np.arange(pq), iS] = 1.0
    A[o + np.arange(pq), iT] = -1.0
    o += pq
    A[o + np.arange(pq), iS] = -1.0
    A[o + np.arange(pq), iT] = -1.0
    o += pq
    A[o, iT] = 1.0
    b[o] = mu
    o += 1
    A[o:o + nz, :nz] = -np.eye(nz)
    c = np.zeros(n)
    c[:nz] = np.where(ti == tj, 0.5, 0.0)
    spec = cn.ConeSpec([("zero", pq), ("nonneg", 2 * pq + 1), ("psd", s)])
    return ConicProblem(A, b, c, spec)


def gen_rpca(p=8, q=3, r=1, seed=0, split="train", index=0, sparse_frac=0.1):
    validate_sizes("rpca", {"p": p, "q": q, "r": r})
    rng = instance_rng(seed, split, index)
    L = rng.standard_normal((p, r)) @ rng.standard_normal((r, q))
    S = np.zeros(p * q)
    k = int(np.floor(sparse_frac * p * q))
    S[rng.permutation(p * q)[:k]] = rng.standard_normal(k)
    S = S.reshape(p, q)
    mu = float(np.sum(np.abs(S)))
    M = L + S
    return RpcaInstance(_rpca_cone(M, mu), M, mu, L, S)


def _project_l1_ball(v, radius):
    if radius <= 0:
        return np.zeros_like(v)
    if np.sum(np.abs(v)) <= radius:
        return v
    u = np.sort(np.abs(v).ravel())[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u * np.arange(1, u.size + 1) > css - radius)[0][-1]
    theta = (css[k] - radius) / (k + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def rpca_admm(M, mu, rho=1.0, iters=20000, tol=1e-12):
    """Singular-value-thresholding ADMM for ``min ||L||_*, ||M - L||_1 <= mu``.

    Returns ``(L, S, objective)``.
    """
    S = np.zeros_like(M)
    U = np.zeros_like(M)
    L = M.copy()
    for _ in range(iters):
        W, sv, Vt = np.linalg.svd(M - S - U, full_matrices=False)
        L = (W * np.maximum(sv - 1.0 / rho, 0.0)) @ Vt
        S_old = S
        S = _project_l1_ball(M - L - U, mu)
        U = U + L + S - M
        r = np.linalg.norm(L + S - M)
        s = rho * np.linalg.norm(S - S_old)
        if r < tol and s < tol:
            break
    return L, S, float(np.sum(np.linalg.svd(L, compute_uv=False)))


# ---------------------------------------------------------------------------
# robust Kalman filtering
# ---------------------------------------------------------------------------


@dataclass
class KalmanInstance:
    problem: ConicProblem
    y: np.ndarray
    Ad: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    mu: float
    rho: float
    x_true: np.ndarray


def kalman_dynamics(n, T, gamma=0.05):
    """Damped double integrator in the plane sampled at ``n`` points over ``[0, T]``."""
    dt = T / (n - 1)
    Ad = np.eye(4)
    Ad[0, 2] = Ad[1, 3] = (1 - gamma * dt / 2) * dt
    Ad[2, 2] = Ad[3, 3] = 1 - gamma * dt
    Bd = np.zeros((4, 2))
    Bd[0, 0] = Bd[1, 1] = dt ** 2 / 2
    Bd[2, 0] = Bd[3, 1] = dt
    C = np.zeros((2, 4))
    C[0, 0] = C[1, 1] = 1.0
    return Ad, Bd, C


def _kalman_cone(y, Ad, Bd, C, mu, rho):
    """``sum ||w_t||^2 + mu * sum huber_rho(||y_t - C x_t||)`` in cone form.

    Uses ``huber(r) = min_a ||a||^2 + 2 rho ||r - a||``. Variables
    ``[x (4n), w (2(n-1)), a (2n), k (n), q]``.
    """
    nt = y.shape[0]
    nx, nw, na = 4 * nt, 2 * (nt - 1), 2 * nt
    ox, ow, oa, ok = 0, nx, nx + nw, nx + nw + na
    oq = ok + nt
    n = oq + 1
    big = 2 + nw + na
    m = 4 * (nt - 1) + big + 3 * nt
    A = np.zeros((m, n))
    b = np.zeros(m)
    row = 0
    for t in range(nt - 1):
        r = slice(row, row + 4)
        A[r, ox + 4 * (t + 1):ox + 4 * (t + 2)] = np.eye(4)
        A[r, ox + 4 * t:ox + 4 * (t + 1)] = -Ad
        A[r, ow + 2 * t:ow + 2 * (t + 1)] = -Bd
        row += 4
    A[row, oq], b[row] = -1.0, 1.0
    A[row + 1, oq], b[row + 1] = -1.0, -1.0
    row += 2
    A[row:row + nw, ow:ow + nw] = -2.0 * np.eye(nw)
    row += nw
    A[row:row + na, oa:oa + na] = -2.0 * np.sqrt(mu) * np.eye(na)
    row += na
    for t in range(nt):
        A[row, ok + t] = -1.0
        A[row + 1:row + 3, ox + 4 * t:ox + 4 * (t + 1)] = C
        A[row + 1:row + 3, oa + 2 * t:oa + 2 * (t + 1)] = np.eye(2)
        b[row + 1:row + 3] = y[t]
        row += 3
    c = np.zeros(n)
    c[oq] = 1.0
    c[ok:ok + nt] = 2.0 * mu * rho
    segs = [("zero", 4 * (nt - 1)), ("soc", big)] + [("soc", 3)] * nt
    return ConicProblem(A, b, c, cn.ConeSpec(segs))


def gen_kalman(n=6, T=8.0, seed=0, split="train", index=0, mu=2.0, rho=2.0,
               noise=1.0, outlier_frac=0.2, outlier_scale=20.0, input_scale=1.0):
    validate_sizes("kalman", {"n": n, "T": T})
    rng = instance_rng(seed, split, index)
    Ad, Bd, C = kalman_dynamics(n, T)
    w = input_scale * rng.standard_normal((n, 2))
    v = noise * rng.standard_normal((n, 2))
    outliers = rng.random(n) < outlier_frac
    v[outliers] *= outlier_scale
    x = np.zeros((n, 4))
    for t in range(n - 1):
        x[t + 1] = Ad @ x[t] + Bd @ w[t]
    y = x @ C.T + v
    return KalmanInstance(_kalman_cone(y, Ad, Bd, C, mu, rho), y, Ad, Bd, C, mu, rho, x)


def huber(r, rho):
    return np.where(r <= rho, r * r, 2 * rho * r - rho * rho)


def _kalman_states(Ad, Bd, x0, w):
    xs = [x0]
    for t in range(w.shape[0]):
        xs.append(Ad @ xs[-1] + Bd @ w[t])
    return np.stack(xs)


def kalman_objective(inst, x0, w):
    xs = _kalman_states(inst.Ad, inst.Bd, x0, w)
    res = np.linalg.norm(inst.y - xs @ inst.C.T, axis=1)
    return float(np.sum(w * w) + inst.mu * np.sum(huber(res, inst.rho)))


def _kalman_lift(inst):
    """Linear map from ``theta = [x0, w]`` to all measurement predictions."""
    nt = inst.y.shape[0]
    dim = 4 + 2 * (nt - 1)
    G = np.zeros((nt, 2, dim))
    Phi = np.zeros((4, dim))
    Phi[:, :4] = np.eye(4)
    for t in range(nt):
        G[t] = inst.C @ Phi
        if t < nt - 1:
            Phi = inst.Ad @ Phi
            Phi[:, 4 + 2 * t:4 + 2 * t + 2] += inst.Bd
    return G


def kalman_oracle(inst):
    """Smooth unconstrained reformulation minimized with BFGS.

    Returns ``(x0, w, objective)``.
    """
    nt = inst.y.shape[0]
    G = _kalman_lift(inst)
    mu, rho = inst.mu, inst.rho

    def fun(theta):
        w = theta[4:]
        pred = np.einsum("tij,j->ti", G, theta)
        r = inst.y - pred
        nr = np.linalg.norm(r, axis=1)
        val = w @ w + mu * np.sum(huber(nr, rho))
        # d huber / d r_vec
        coef = np.where(nr <= rho, 2.0, 2.0 * rho / np.where(nr > 0, nr, 1.0))
        dr = -(mu * coef)[:, None] * r
        grad = np.einsum("ti,tij->j", dr, G)
        grad[4:] += 2 * w
        return val, grad

    theta0 = np.zeros(4 + 2 * (nt - 1))
    res = scipy.optimize.minimize(
        fun, theta0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 20000}
    )
    theta = res.x
    return theta[:4], theta[4:].reshape(nt - 1, 2), float(fun(theta)[0])


def kalman_least_squares(inst):
    """Minimizer of ``||w||^2 + mu sum ||y_t - C x_t||^2`` (the huge-rho limit)."""
    G = _kalman_lift(inst)
    nt = inst.y.shape[0]
    dim = G.shape[2]
    Gs = G.reshape(2 * nt, dim)
    reg = np.zeros(dim)
    reg[4:] = 1.0
    H = inst.mu * Gs.T @ Gs + np.diag(reg)
    theta = np.linalg.solve(H, inst.mu * Gs.T @ inst.y.ravel())
    w = theta[4:].reshape(nt - 1, 2)
    r = inst.y.ravel() - Gs @ theta
    return theta[:4], w, float(w.ravel() @ w.ravel() + inst.mu * r @ r)


# ---------------------------------------------------------------------------
# elastic net and ISTA
# ---------------------------------------------------------------------------


@dataclass
class ElasticNetInstance:
    A: np.ndarray
    b: np.ndarray
    mu: float
    mu_max: float
    alpha: float
    L: float
    beta: float
    x_hat: np.ndarray

    @property
    def kappa(self):
        return self.alpha * self.mu * self.beta


def make_elastic_net(A, b, beta=0.5, mu_ratio=0.001, step=1.8, x_hat=None):
    mu_max = float(np.max(np.abs(A.T @ b)))
    mu = mu_ratio * mu_max
    L = float(np.linalg.eigvalsh(A.T @ A)[-1]) + mu / 2
    return ElasticNetInstance(A, b, mu, mu_max, step / L, L, beta,
                              np.zeros(A.shape[1]) if x_hat is None else x_hat)


def gen_elastic_net(m=25, n=25, seed=0, split="train", index=0):
    validate_sizes("elastic_net", {"m": m, "n": n})
    rng = instance_rng(seed, split, index)
    A = rng.standard_normal((m, n))
    x_hat = rng.standard_normal(n) * (rng.random(n) < 0.1)
    b = A @ x_hat + 0.1 * rng.standard_normal(m)
    return make_elastic_net(A, b, x_hat=x_hat)


def shrink(x, kappa):
    """Soft thresholding ``sign(x) * (|x| - kappa)_+``."""
    return ad.soft_threshold(x, kappa)


def ista_step(inst, x):
    """One ISTA step for the elastic net (taped when ``x`` is a Tensor)."""
    smooth = (1.0 - inst.beta) * inst.mu
    grad = ad.matvec(inst.A.T, ad.matvec(inst.A, x) - inst.b) + x * smooth
    return shrink(x - grad * inst.alpha, inst.kappa)


def elastic_net_objective(inst, x):
    r = inst.A @ x - inst.b
    return float(0.5 * r @ r + inst.mu * ((1 - inst.beta) / 2 * x @ x
                                          + inst.beta * np.sum(np.abs(x))))


def elastic_net_optimality(inst, x):
    """Distance of ``0`` from the subdifferential of the objective at ``x``."""
    g = inst.A.T @ (inst.A @ x - inst.b) + inst.mu * (1 - inst.beta) * x
    lam = inst.mu * inst.beta
    on = x != 0
    res = np.where(on, g + lam * np.sign(x), np.maximum(np.abs(g) - lam, 0.0))
    return float(np.linalg.norm(res))


def elastic_net_solution(inst, iters=100000, tol=1e-15):
    """Long ISTA run, then an exact solve on the detected support and signs."""
    x = np.zeros(inst.A.shape[1])
    for _ in range(iters):
        x_new = ista_step(inst, x)
        done = np.max(np.abs(x_new - x)) <= tol
        x = x_new
        if done:
            break
    on = np.abs(x) > 0
    if on.any():
        As = inst.A[:, on]
        H = As.T @ As + inst.mu * (1 - inst.beta) * np.eye(on.sum())
        rhs = As.T @ inst.b - inst.mu * inst.beta * np.sign(x[on])
        polished = np.zeros_like(x)
        polished[on] = np.linalg.solve(H, rhs)
        if np.array_equal(np.sign(polished), np.sign(x)) and elastic_net_optimality(
            inst, polished
        ) <= elastic_net_optimality(inst, x):
            x = polished
    return x


def elastic_net_cone(inst):
    """Cone form of the elastic net: a lasso on ``[A; sqrt(mu (1-beta)) I]``."""
    n = inst.A.shape[1]
    F = np.vstack([inst.A, np.sqrt(inst.mu * (1 - inst.beta)) * np.eye(n)])
    g = np.concatenate([inst.b, np.zeros(n)])
    return _l1_least_squares_cone(F, g, inst.mu * inst.beta)


class IstaBatch:
    """A stack of elastic-net instances exposing the fixed-point family interface."""

    has_primal_dual = False
    tau_index = -1

    def __init__(self, instances):
        instances = list(instances)
        if not instances:
            raise ConfigurationError("empty instance batch")
        self.instances = instances
        self.A = np.stack([i.A for i in instances])
        self.b = np.stack([i.b for i in instances])
        self.alpha = np.array([i.alpha for i in instances])[:, None]
        self.mu = np.array([i.mu for i in instances])[:, None]
        self.beta = np.array([i.beta for i in instances])[:, None]
        self.At = np.ascontiguousarray(np.swapaxes(self.A, 1, 2))

    def __len__(self):
        return len(self.instances)

    @property
    def iterate_dim(self):
        return self.A.shape[2]

    def subset(self, idx):
        return IstaBatch([self.instances[i] for i in idx])

    def with_scaling(self, scale_iterates):
        return self

    def default_iterate(self):
        return np.zeros((len(self), self.iterate_dim))

    def context(self):
        B = len(self)
        return np.concatenate([self.A.reshape(B, -1), self.b], axis=1)

    def fmap(self, x):
        smooth = (1.0 - self.beta) * self.mu
        grad = ad.matvec(self.At, ad.matvec(self.A, x) - self.b) + x * smooth
        return ad.soft_threshold(x - grad * self.alpha, self.alpha * self.mu * self.beta)

    def residual(self, x, x_next, normalize=True):
        return ad.norm2(x - x_next, axis=-1)

    def primal_dual(self, x):
        raise ConfigurationError("elastic net has no primal/dual residuals")

    def metrics(self, x, x_next, normalize=True):
        x, x_next = ad.data_of(x), ad.data_of(x_next)
        nan = np.full(len(self), np.nan)
        return {
            "fp_residual": np.linalg.norm(x - x_next, axis=-1),
            "primal": nan,
            "dual": nan,
            "gap": nan,
            "tau": np.ones(len(self)),
        }


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def generate(family, sizes=None, seed=0, split="train", index=0):
    """Return the family's instance record (with ``.problem`` for cone families)."""
    s = {**DESK_SIZES[family], **(sizes or {})}
    if family == "lasso":
        return gen_lasso(s["p"], s["q"], seed, split, index)
    if family == "rpca":
        return gen_rpca(s["p"], s["q"], s["r"], seed, split, index)
    if family == "kalman":
        return gen_kalman(int(s["n"]), float(s["T"]), seed, split, index)
    if family == "elastic_net":
        return gen_elastic_net(s["m"], s["n"], seed, split, index)
    raise ConfigurationError(f"unknown family {family!r}")


# Ratio ||c|| / ||b|| after equilibration. The right value is family specific;
# these were picked by sweeping 5000-iteration accuracy over a few seeds.
BALANCE = {"lasso": 1.0, "rpca": 0.1, "kalman": 1.0, "elastic_net": 3.0}


def cone_problem(family, inst):
    if family == "elastic_net":
        return elastic_net_cone(inst)
    return inst.problem


def prepare(family, inst, equil_iters=DEFAULT_EQUIL_ITERS, balance=None):
    """Equilibrated cone problem for an instance record."""
    bal = BALANCE[family] if balance is None else balance
    return equilibrate(cone_problem(family, inst), equil_iters, bal)


def context_vector(problem):
    """``[vec(A) row-major; b; c]`` for a cone problem, ``[vec(A); b]`` for elastic net."""
    if isinstance(problem, ElasticNetInstance):
        return np.concatenate([problem.A.ravel(), problem.b])
    return np.concatenate([problem.A.ravel(), problem.b, problem.c])


def oracle_objective(family, inst):
    """Independent high-accuracy optimal value for an instance."""
    if family == "lasso":
        z = lasso_cd(inst.F, inst.g, inst.mu)
        return lasso_objective(inst.F, inst.g, inst.mu, z)
    if family == "rpca":
        return rpca_admm(inst.M, inst.mu)[2]
    if family == "kalman":
        return kalman_oracle(inst)[2]
    if family == "elastic_net":
        return elastic_net_objective(inst, elastic_net_solution(inst))
    raise ConfigurationError(f"unknown family {family!r}")


def family_batch(family, instances, as_cone=False, **kw):
    """Batched fixed-point map for a list of instance records.

    Elastic net uses the ISTA map unless ``as_cone`` asks for its cone form.
    Keyword arguments go to :class:`~fpaccel.conic.ProblemBatch`.
    """
    if family == "elastic_net" and not as_cone:
        return IstaBatch(instances)
    return ProblemBatch([prepare(family, i) for i in instances], **kw)
