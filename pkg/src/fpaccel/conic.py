"""Standard-form cone programs and the homogeneous-embedding splitting map.

A problem is ``minimize c^T x  s.t.  A x + s = b, s in K``. The solver iterate
is the pair ``(u, v)`` of the self-dual embedding, each of length
``N = n + m + 1`` with the scale variable ``tau`` in the last slot of ``u``.
Batched code stores the pair as one row ``z = [u, v]`` of length ``2N``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cones as cn
from .errors import ConfigurationError, NumericError

TAU_FLOOR = 1e-6
DEFAULT_ALPHA = 1.5
DEFAULT_EQUIL_ITERS = 10
DEFAULT_DATA_SCALE = 0.5 ** 0.5
_SCALE_CLAMP = (1e-4, 1e4)


@dataclass
class ConicProblem:
    """Cone program data. ``A, b, c`` are the working (possibly scaled) data.

    The original problem is ``A0 = D^-1 A E^-1``, ``b0 = D^-1 b / sigma_b`` and
    ``c0 = E^-1 c / sigma_c``; all scalings are identity until
    :func:`equilibrate` sets them.
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    cones: cn.ConeSpec
    D: np.ndarray = None
    E: np.ndarray = None
    sigma_b: float = 1.0
    sigma_c: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        m, n = self.A.shape
        if self.b.shape != (m,) or self.c.shape != (n,):
            raise ConfigurationError(
                f"inconsistent data: A {self.A.shape}, b {self.b.shape}, c {self.c.shape}"
            )
        if self.cones.dim != m:
            raise ConfigurationError(f"cone dim {self.cones.dim} != rows of A {m}")
        for name in ("A", "b", "c"):
            if not np.isfinite(getattr(self, name)).all():
                raise ConfigurationError(f"non-finite entries in {name}")
        self.D = np.ones(m) if self.D is None else np.asarray(self.D, dtype=np.float64)
        self.E = np.ones(n) if self.E is None else np.asarray(self.E, dtype=np.float64)

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    def original(self):
        """Return the unscaled ``(A, b, c)``."""
        A = self.A / self.D[:, None] / self.E[None, :]
        return A, self.b / self.D / self.sigma_b, self.c / self.E / self.sigma_c


def _segment_rows(cones):
    out = []
    off = 0
    for s in cones.segments:
        out.append((s.kind, off, off + s.dim))
        off += s.dim
    return out


def equilibrate(problem, n_iters=DEFAULT_EQUIL_ITERS, balance=1.0, data_scale=DEFAULT_DATA_SCALE):
    """Ruiz-style alternating row/column rescaling of ``A``, then scale b, c.

    Rows of a SOC or PSD segment share one factor so the cone is preserved;
    zero/free/nonneg rows scale independently. Afterwards ``b`` and ``c`` get
    separate scalars chosen so that ``||c|| = balance * ||b||``; the embedding
    is invariant to a joint scale but not to this ratio, which trades primal
    against dual progress. The joint size is ``||(b, c)|| = data_scale``;
    keeping it below sqrt(1/2) guarantees ``tau >= 1/2`` after the first step
    from the default start, since ``(I + Q)^-1`` has tau-diagonal at least
    ``1 / (1 + ||b||^2 + ||c||^2)``. Starts from the original data.
    """
    A0, b0, c0 = problem.original()
    m, n = A0.shape
    D = np.ones(m)
    E = np.ones(n)
    A = A0.copy()
    rows = _segment_rows(problem.cones)
    lo, hi = _SCALE_CLAMP
    for _ in range(n_iters):
        rn = np.linalg.norm(A, axis=1)
        for kind, a, b in rows:
            if kind in ("soc", "psd"):
                rn[a:b] = np.sqrt(np.mean(rn[a:b] ** 2))
        rn = np.where(rn > 0, rn, 1.0)
        d = np.clip(1.0 / np.sqrt(rn), lo, hi)
        cn_ = np.linalg.norm(A, axis=0)
        cn_ = np.where(cn_ > 0, cn_, 1.0)
        e = np.clip(1.0 / np.sqrt(cn_), lo, hi)
        A = d[:, None] * A * e[None, :]
        D *= d
        E *= e
    bs = D * b0
    cs = E * c0
    nb = np.linalg.norm(bs) or 1.0
    nc = np.linalg.norm(cs) or 1.0
    # ||b||^2 + ||c||^2 = data_scale^2
    target_b = data_scale / np.sqrt(1.0 + balance * balance)
    sigma_b = float(np.clip(target_b / nb, lo * lo, hi * hi))
    sigma_c = float(np.clip(balance * target_b / nc, lo * lo, hi * hi))
    return ConicProblem(A, sigma_b * bs, sigma_c * cs, problem.cones, D, E, sigma_b, sigma_c)


@dataclass(frozen=True)
class Embedding:
    Q: np.ndarray
    fact: ad.LuFactorization


def embedding_matrix(A, b, c):
    """Skew-symmetric ``Q = [[0, A^T, c], [-A, 0, b], [-c^T, -b^T, 0]]``."""
    m, n = A.shape[-2:]
    N = n + m + 1
    Q = np.zeros(A.shape[:-2] + (N, N))
    Q[..., :n, n:n + m] = np.swapaxes(A, -1, -2)
    Q[..., :n, -1] = c
    Q[..., n:n + m, :n] = -A
    Q[..., n:n + m, -1] = b
    Q[..., -1, :n] = -c
    Q[..., -1, n:n + m] = -b
    return Q


def embed(problem):
    Q = embedding_matrix(problem.A, problem.b, problem.c)
    return Embedding(Q, ad.lu_factor(np.eye(Q.shape[-1]) + Q))


class ProblemBatch:
    """A stack of same-shape problems sharing one cone spec, factored once."""

    def __init__(self, problems, alpha=DEFAULT_ALPHA, scale_iterates=True):
        problems = list(problems)
        if not problems:
            raise ConfigurationError("empty problem batch")
        p0 = problems[0]
        for p in problems:
            if p.cones != p0.cones or p.A.shape != p0.A.shape:
                raise ConfigurationError("all problems in a batch need the same shape and cones")
        self.problems = problems
        self.cones = p0.cones
        self.m, self.n = p0.A.shape
        self.N = self.n + self.m + 1
        self.A = np.stack([p.A for p in problems])
        self.b = np.stack([p.b for p in problems])
        self.c = np.stack([p.c for p in problems])
        self.D = np.stack([p.D for p in problems])
        self.E = np.stack([p.E for p in problems])
        self.sigma_b = np.array([p.sigma_b for p in problems])[:, None]
        self.sigma_c = np.array([p.sigma_c for p in problems])[:, None]
        orig = [p.original() for p in problems]
        self.A0 = np.stack([o[0] for o in orig])
        self.b0 = np.stack([o[1] for o in orig])
        self.c0 = np.stack([o[2] for o in orig])
        self.Q = embedding_matrix(self.A, self.b, self.c)
        self.fact = ad.lu_factor(np.eye(self.N)[None] + self.Q)
        self.u_cone = cn.free(self.n) + cn.dual_cone(self.cones) + cn.nonneg(1)
        self.alpha = alpha
        self.scale_iterates = scale_iterates

    def __len__(self):
        return len(self.problems)

    @property
    def iterate_dim(self):
        return 2 * self.N

    @property
    def tau_index(self):
        return self.N - 1

    def subset(self, idx):
        sub = object.__new__(ProblemBatch)
        sub.__dict__.update(self.__dict__)
        sub.problems = [self.problems[i] for i in idx]
        for name in ("A", "b", "c", "D", "E", "sigma_b", "sigma_c", "A0", "b0", "c0", "Q"):
            setattr(sub, name, getattr(self, name)[idx])
        sub.fact = ad.LuFactorization(self.fact.lu[idx], self.fact.piv[idx])
        return sub

    def with_scaling(self, scale_iterates):
        """The same batch with iterate rescaling switched on or off."""
        if scale_iterates == self.scale_iterates:
            return self
        out = object.__new__(ProblemBatch)
        out.__dict__.update(self.__dict__)
        out.scale_iterates = scale_iterates
        return out

    def default_iterate(self):
        z = np.zeros((len(self), 2 * self.N))
        z[:, self.N - 1] = 1.0
        z[:, 2 * self.N - 1] = 1.0
        return z

    def context(self):
        """Per-instance context ``[vec(A); b; c]`` of the working data."""
        B = len(self)
        return np.concatenate([self.A.reshape(B, -1), self.b, self.c], axis=1)

    # the interface shared with other fixed-point families

    has_primal_dual = True

    def fmap(self, z):
        return fp_map(self, z, self.alpha, self.scale_iterates)

    def residual(self, z, z_next, normalize=True):
        return fp_residual(z, z_next, self.tau_index, normalize)

    def primal_dual(self, z):
        return primal_dual_residuals(self, z)

    def metrics(self, z, z_next, normalize=True):
        z, z_next = ad.data_of(z), ad.data_of(z_next)
        p, d = primal_dual_residuals(self, z)
        return {
            "fp_residual": fp_residual(z, z_next, self.tau_index, normalize),
            "primal": p,
            "dual": d,
            "gap": duality_gap(self, z),
            "tau": z[:, self.tau_index].copy(),
        }


def as_batch(problems, **kw):
    if isinstance(problems, ProblemBatch):
        return problems
    if isinstance(problems, ConicProblem):
        return ProblemBatch([problems], **kw)
    return ProblemBatch(problems, **kw)


# ---------------------------------------------------------------------------
# the fixed-point map
# ---------------------------------------------------------------------------


def fp_map(batch, z, alpha=DEFAULT_ALPHA, scale_iterates=True):
    """One relaxed splitting step on stacked iterates ``z = [u, v]``."""
    N = batch.N
    u = z[:, :N]
    v = z[:, N:]
    ut = ad.solve_with_vjp(batch.fact, u + v)
    if alpha != 1.0:
        ut = ut * alpha + u * (1.0 - alpha)
    u_next = cn.project(batch.u_cone, ut - v)
    v_next = v - ut + u_next
    z_next = ad.concat([u_next, v_next], axis=-1)
    if scale_iterates:
        nrm = ad.norm2(z_next, axis=-1, keepdims=True)
        z_next = z_next * (np.sqrt(N) / ad.maximum(nrm, 1e-300))
    return z_next


@dataclass
class SolverState:
    u: np.ndarray
    v: np.ndarray
    t: int = 0


def initial_state(problem):
    N = problem.n + problem.m + 1
    u = np.zeros(N)
    v = np.zeros(N)
    u[-1] = v[-1] = 1.0
    return SolverState(u, v, 0)


def fp_step(state, embedding, relax_alpha=DEFAULT_ALPHA, cones=None, n=None, scale_iterates=False):
    """Single-problem step on an explicit :class:`SolverState`.

    ``cones`` is the problem's cone K and ``n`` its number of variables.
    """
    N = embedding.Q.shape[-1]
    if state.u.shape != (N,) or state.v.shape != (N,):
        raise ConfigurationError("state dims do not match the embedding")
    u_cone = cn.free(n) + cn.dual_cone(cones) + cn.nonneg(1)
    ut = ad.lu_solve(embedding.fact, state.u + state.v)
    uh = relax_alpha * ut + (1.0 - relax_alpha) * state.u
    u = cn.project_array(u_cone, uh - state.v)
    v = state.v - uh + u
    if scale_iterates:
        s = np.sqrt(N) / np.linalg.norm(np.concatenate([u, v]))
        u, v = u * s, v * s
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError(f"non-finite iterate at iteration {state.t + 1}")
    return SolverState(u, v, state.t + 1)


def fp_residual(z_t, z_next, tau_index, normalize=True):
    """Row-wise ``||z_t / tau_t - z_next / tau_next||`` (plain norm if not normalized)."""
    if not normalize:
        return ad.norm2(z_t - z_next, axis=-1)
    k = tau_index
    tt = ad.maximum(z_t[..., k:k + 1], TAU_FLOOR)
    tn = ad.maximum(z_next[..., k:k + 1], TAU_FLOOR)
    return ad.norm2(z_t / tt - z_next / tn, axis=-1)


def _unscaled_blocks(batch, z):
    n, m, N = batch.n, batch.m, batch.N
    tau = ad.maximum(z[:, N - 1:N], TAU_FLOOR)
    sb, sc = batch.sigma_b, batch.sigma_c
    x = z[:, :n] * (batch.E / sb) / tau
    y = z[:, n:n + m] * (batch.D / sc) / tau
    s = z[:, N + n:N + n + m] / (batch.D * sb) / tau
    return x, y, s


def primal_dual_residuals(batch, z):
    """Relative primal and dual residuals of the original problems, taped."""
    x, y, s = _unscaled_blocks(batch, z)
    r_p = ad.matvec(batch.A0, x) + s - batch.b0
    r_d = ad.rmatvec(batch.A0, y) + batch.c0
    p = ad.norm2(r_p, axis=-1) / (1.0 + np.linalg.norm(batch.b0, axis=-1))
    d = ad.norm2(r_d, axis=-1) / (1.0 + np.linalg.norm(batch.c0, axis=-1))
    return p, d


def duality_gap(batch, z):
    x, y, _ = (ad.data_of(t) for t in _unscaled_blocks(batch, ad.data_of(z)))
    cx = np.sum(batch.c0 * x, axis=-1)
    by = np.sum(batch.b0 * y, axis=-1)
    return np.abs(cx + by) / (1.0 + np.abs(cx) + np.abs(by))


@dataclass
class Solution:
    x: np.ndarray = None
    y: np.ndarray = None
    s: np.ndarray = None
    status: str = "solved"
    tau: float = field(default=1.0)


def extract_solution(problem, state):
    """Recover ``(x, y, s)`` of the original problem from an embedding iterate."""
    n, m = problem.n, problem.m
    tau = float(state.u[-1])
    if tau < TAU_FLOOR:
        return Solution(status="infeasible_or_unbounded", tau=tau)
    x = state.u[:n] / tau * problem.E / problem.sigma_b
    y = state.u[n:n + m] / tau * problem.D / problem.sigma_c
    s = state.v[n:n + m] / tau / problem.D / problem.sigma_b
    return Solution(x, y, s, "solved", tau)


def split_state(batch, z, i=0, t=0):
    z = ad.data_of(z)
    return SolverState(z[i, :batch.N].copy(), z[i, batch.N:].copy(), t)
