"""Reverse-mode differentiation over dense float64 arrays.

Every op accepts plain ndarrays or :class:`Tensor` objects. When no input is a
Tensor the op is just numpy and returns an ndarray, so the same solver code
runs untaped for baselines and taped for training. When some input is a
Tensor the result is recorded on that input's :class:`Tape`.

Kinks take a fixed one-sided choice: relu and the floor in :func:`maximum`
pass the gradient where ``x > c`` (resp. ``x >= floor``), soft thresholding
passes it where ``|x| > kappa``, and the norm has zero gradient at the origin.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError, NumericError


class Tensor:
    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, data, tape, index):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: object  # callable(grad) -> tuple of input grads, or None for leaves


class Tape:
    """Append-only record of operations; node order is topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value):
        data = np.array(value, dtype=np.float64)
        _check_finite("variable", data)
        self.nodes.append(_Node("leaf", (), None))
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, op, data, inputs, backward):
        idx = tuple(x.index if isinstance(x, Tensor) else -1 for x in inputs)
        self.nodes.append(_Node(op, idx, backward))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, output, seed=None):
        """Propagate ``seed`` from ``output`` back to every node.

        Returns a :class:`Gradients` mapping leaf tensors to their adjoints.
        """
        if not self.nodes:
            raise ConfigurationError("backward on an empty tape")
        if not isinstance(output, Tensor) or output.tape is not self:
            raise ConfigurationError("output was not recorded on this tape")
        if seed is None:
            if output.data.size != 1:
                raise ConfigurationError("a seed is required for non-scalar outputs")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ConfigurationError(f"seed shape {seed.shape} != output shape {output.shape}")
        adj = [None] * len(self.nodes)
        adj[output.index] = seed
        for i in range(output.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            grads = node.backward(g)
            for j, gj in zip(node.inputs, grads):
                if j < 0 or gj is None:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        return Gradients(adj)


class Gradients:
    def __init__(self, adjoints):
        self._adj = adjoints

    def __getitem__(self, tensor):
        g = self._adj[tensor.index]
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def data_of(x):
    return x.data if isinstance(x, Tensor) else x


def _tape_of(inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ConfigurationError("inputs live on different tapes")
    return tape


def _check_finite(op, data):
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite output from op '{op}'")


def custom_op(op, data, inputs, backward):
    """Record ``data`` as the result of ``op`` on ``inputs``.

    ``backward(g)`` must return one adjoint (or None) per input. Returns a
    plain array when no input is taped.
    """
    _check_finite(op, data)
    tape = _tape_of(inputs)
    if tape is None:
        return data
    return tape._record(op, data, inputs, backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(data_of(x))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    ad, bd = data_of(a), data_of(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return custom_op(
        "add", ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    ad, bd = data_of(a), data_of(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return custom_op(
        "sub", ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    ad, bd = data_of(a), data_of(b)
    return custom_op(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, np.shape(ad)), _unbroadcast(g * ad, np.shape(bd))),
    )


def div(a, b):
    ad, bd = data_of(a), data_of(b)
    if np.any(bd == 0):
        raise NumericError("division by zero in op 'div'")
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, np.shape(ad))
        gb = _unbroadcast(-g * out / bd, np.shape(bd))
        return ga, gb

    return custom_op("div", out, (a, b), backward)


def matmul(a, b):
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` a (k, h) matrix."""
    ad, bd = data_of(a), data_of(b)
    if bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return custom_op("matmul", ad @ bd, (a, b), backward)


def matvec(M, x):
    """Batched ``M x`` for M of shape (..., m, n) and x of shape (..., n)."""
    Md, xd = data_of(M), data_of(x)
    if Md.shape[-1] != xd.shape[-1]:
        raise ConfigurationError(f"matvec shape mismatch {Md.shape} x {xd.shape}")
    out = np.matmul(Md, xd[..., None])[..., 0]

    def backward(g):
        gM = None
        if isinstance(M, Tensor):
            gM = _unbroadcast(g[..., :, None] * xd[..., None, :], Md.shape)
        gx = _unbroadcast(np.matmul(g[..., None, :], Md)[..., 0, :], xd.shape)
        return gM, gx

    return custom_op("matvec", out, (M, x), backward)


def rmatvec(M, y):
    """Batched ``M^T y``."""
    Md, yd = data_of(M), data_of(y)
    if Md.shape[-2] != yd.shape[-1]:
        raise ConfigurationError(f"rmatvec shape mismatch {Md.shape} x {yd.shape}")
    out = np.matmul(yd[..., None, :], Md)[..., 0, :]

    def backward(g):
        gM = None
        if isinstance(M, Tensor):
            gM = _unbroadcast(yd[..., :, None] * g[..., None, :], Md.shape)
        gy = _unbroadcast(np.matmul(Md, g[..., None])[..., 0], yd.shape)
        return gM, gy

    return custom_op("rmatvec", out, (M, y), backward)


def concat(xs, axis=-1):
    datas = [data_of(x) for x in xs]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op("concat", out, tuple(xs), backward)


def getitem(x, idx):
    xd = data_of(x)
    out = xd[idx]

    def backward(g):
        full = np.zeros_like(xd)
        full[idx] += g
        return (full,)

    return custom_op("slice", np.array(out), (x,), backward)


def reshape(x, shape):
    xd = data_of(x)
    return custom_op("reshape", xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def tanh(x):
    out = np.tanh(data_of(x))
    return custom_op("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    out = _sigmoid(data_of(x))
    return custom_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def relu(x):
    xd = data_of(x)
    mask = xd > 0
    return custom_op("relu", np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))


def elu(x):
    xd = data_of(x)
    neg = np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg)
    return custom_op("elu", out, (x,), lambda g: (g * np.where(xd > 0, 1.0, neg + 1.0),))


ACTIVATIONS = {"tanh": tanh, "relu": relu, "elu": elu, "sigmoid": sigmoid}


def maximum(x, floor):
    """Clamp ``x`` below at the constant ``floor``."""
    xd = data_of(x)
    mask = xd >= floor
    return custom_op("maximum", np.where(mask, xd, floor), (x,), lambda g: (g * mask,))


def soft_threshold(x, kappa):
    """Elementwise ``sign(x) * max(|x| - kappa, 0)``; ``kappa`` broadcasts."""
    if np.any(np.asarray(kappa) < 0):
        raise ConfigurationError("threshold must be nonnegative")
    xd = data_of(x)
    mask = np.abs(xd) > kappa
    out = np.where(mask, xd - np.sign(xd) * kappa, 0.0)
    return custom_op("soft_threshold", out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001
    xd = data_of(x)
    out = np.sum(xd, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return custom_op("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None):
    xd = data_of(x)
    n = xd.size if axis is None else xd.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def norm2(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``."""
    xd = data_of(x)
    out = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * xd / safe, 0.0),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return custom_op("norm2", res, (x,), backward)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LuFactorization:
    """Partial-pivoting LU of one matrix (lu: (n, n)) or a stack (B, n, n)."""

    lu: np.ndarray
    piv: np.ndarray

    @property
    def n(self):
        return self.lu.shape[-1]

    @property
    def batched(self):
        return self.lu.ndim == 3


def lu_factor(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim not in (2, 3) or M.shape[-1] != M.shape[-2]:
        raise ConfigurationError(f"lu_factor needs square matrices, got {M.shape}")
    stack = M if M.ndim == 3 else M[None]
    try:
        lu, piv = _kernels.lu_factor(stack)
    except _kernels.SingularMatrixError as e:
        raise NumericError(str(e)) from None
    if M.ndim == 2:
        return LuFactorization(lu[0], piv[0])
    return LuFactorization(lu, piv)


def _lu_apply(fact, v, trans):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != fact.n:
        raise ConfigurationError(f"rhs length {v.shape[-1]} != matrix size {fact.n}")
    if fact.batched:
        if v.ndim != 2 or v.shape[0] != fact.lu.shape[0]:
            raise ConfigurationError("batched factorization needs a (B, n) right-hand side")
        return _kernels.lu_solve(fact.lu, fact.piv, v, trans)
    if v.ndim == 1:
        return _kernels.lu_solve(fact.lu[None], fact.piv[None], v[None], trans)[0]
    B = v.shape[0]
    lu = np.broadcast_to(fact.lu, (B,) + fact.lu.shape)
    piv = np.broadcast_to(fact.piv, (B,) + fact.piv.shape)
    return _kernels.lu_solve(np.ascontiguousarray(lu), np.ascontiguousarray(piv), v, trans)


def lu_solve(fact, v, trans=False):
    """Solve ``M u = v`` (or ``M^T u = v``) with a cached factorization."""
    return _lu_apply(fact, v, int(trans))


def solve_with_vjp(fact, v):
    """Taped ``u = M^{-1} v``; the adjoint reuses the factors on ``M^T``.

    The matrix is treated as constant data, so only ``v`` receives a gradient.
    """
    out = _lu_apply(fact, data_of(v), 0)
    return custom_op("lu_solve", out, (v,), lambda g: (_lu_apply(fact, g, 1),))


# ---------------------------------------------------------------------------
# recurrent cells (fused, hand-written adjoints)
# ---------------------------------------------------------------------------


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step. Weights are (in, 3H) and (H, 3H), gate order r, z, n."""
    xd, hd = data_of(x), data_of(h)
    Wi, Wh, bi, bh = data_of(w_ih), data_of(w_hh), data_of(b_ih), data_of(b_hh)
    H = hd.shape[-1]
    if Wi.shape != (xd.shape[-1], 3 * H) or Wh.shape != (H, 3 * H):
        raise ConfigurationError("gru_cell weight shapes do not match input/hidden sizes")
    gi = xd @ Wi + bi
    gh = hd @ Wh + bh
    r = _sigmoid(gi[..., :H] + gh[..., :H])
    z = _sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * hd

    def backward(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (hd - n) * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dn], axis=-1)
        dgh = np.concatenate([dr, dz, dn * r], axis=-1)
        dx = dgi @ Wi.T
        dh = dgh @ Wh.T + g * z
        dWi = xd.reshape(-1, xd.shape[-1]).T @ dgi.reshape(-1, 3 * H)
        dWh = hd.reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
        dbi = dgi.reshape(-1, 3 * H).sum(axis=0)
        dbh = dgh.reshape(-1, 3 * H).sum(axis=0)
        return dx, dh, dWi, dWh, dbi, dbh

    return custom_op("gru_cell", out, (x, h, w_ih, w_hh, b_ih, b_hh), backward)


def lstm_cell(x, hc, w_ih, w_hh, b):
    """One LSTM step on the packed state ``[h, c]`` of width 2H.

    Weights are (in, 4H) and (H, 4H), gate order i, f, g, o.
    """
    xd, hcd = data_of(x), data_of(hc)
    Wi, Wh, bd = data_of(w_ih), data_of(w_hh), data_of(b)
    H = hcd.shape[-1] // 2
    if Wi.shape != (xd.shape[-1], 4 * H) or Wh.shape != (H, 4 * H):
        raise ConfigurationError("lstm_cell weight shapes do not match input/hidden sizes")
    h, c = hcd[..., :H], hcd[..., H:]
    pre = xd @ Wi + h @ Wh + bd
    i = _sigmoid(pre[..., :H])
    f = _sigmoid(pre[..., H:2 * H])
    gg = np.tanh(pre[..., 2 * H:3 * H])
    o = _sigmoid(pre[..., 3 * H:])
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    h2 = o * tc
    out = np.concatenate([h2, c2], axis=-1)

    def backward(g):
        gh, gc = g[..., :H], g[..., H:]
        dc2 = gc + gh * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc2 * gg * i * (1.0 - i),
                dc2 * c * f * (1.0 - f),
                dc2 * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dx = dpre @ Wi.T
        dh = dpre @ Wh.T
        dhc = np.concatenate([dh, dc2 * f], axis=-1)
        dWi = xd.reshape(-1, xd.shape[-1]).T @ dpre.reshape(-1, 4 * H)
        dWh = h.reshape(-1, H).T @ dpre.reshape(-1, 4 * H)
        db = dpre.reshape(-1, 4 * H).sum(axis=0)
        return dx, dhc, dWi, dWh, db

    return custom_op("lstm_cell", out, (x, hc, w_ih, w_hh, b), backward)


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------


def grad_check(op_closure, point, eps=1e-6):
    """Max over coordinates of |analytic - central difference| / max(1, |fd|).

    ``op_closure`` maps an array (or Tensor) to a scalar.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    out = op_closure(x)
    analytic = tape.backward(out)[x]
    worst = 0.0
    for i in range(point.size):
        xp = point.copy()
        xm = point.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        fd = (float(np.sum(op_closure(xp))) - float(np.sum(op_closure(xm)))) / (2 * eps)
        err = abs(analytic.flat[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
