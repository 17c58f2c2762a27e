"""Product cones, Euclidean projections onto them, and projection adjoints.

PSD blocks are stored as scaled vectors: the upper triangle of a symmetric
``s x s`` matrix in row-major order with off-diagonals multiplied by sqrt(2),
so vector inner products equal trace inner products.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels
from .autodiff import custom_op, data_of
from .errors import ConfigurationError

KINDS = ("zero", "free", "nonneg", "soc", "psd")
_SHORT = {"zero": "z", "free": "f", "nonneg": "l", "soc": "q", "psd": "s"}
_LONG = {v: k for k, v in _SHORT.items()}
_DUAL = {"zero": "free", "free": "zero", "nonneg": "nonneg", "soc": "soc", "psd": "psd"}

# eigenvalue gap below which divided differences fall back to the derivative
PSD_TIE_TOL = 1e-9


@dataclass(frozen=True)
class Segment:
    kind: str
    size: int  # vector length, except for psd where it is the matrix side

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise ConfigurationError(f"cone segment size must be >= 1, got {self.size}")

    @property
    def dim(self):
        if self.kind == "psd":
            return self.size * (self.size + 1) // 2
        return self.size


@dataclass(frozen=True)
class ConeSpec:
    segments: tuple

    def __init__(self, segments):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in segments)
        object.__setattr__(self, "segments", segs)

    @property
    def dim(self):
        return int(np.sum([s.dim for s in self.segments], dtype=np.int64))

    def __add__(self, other):
        return ConeSpec(self.segments + other.segments)

    def pairs(self):
        return [(s.kind, s.size) for s in self.segments]

    def to_string(self):
        return ",".join(f"{_SHORT[s.kind]}:{s.size}" for s in self.segments)

    @classmethod
    def from_string(cls, text):
        if not text:
            return cls(())
        segs = []
        for part in text.split(","):
            k, n = part.split(":")
            segs.append(Segment(_LONG[k], int(n)))
        return cls(segs)

    @cached_property
    def _plan(self):
        """Offsets per segment plus gather indices for same-size SOC groups."""
        offsets = []
        off = 0
        soc = {}
        for s in self.segments:
            offsets.append((s, off, off + s.dim))
            if s.kind == "soc":
                soc.setdefault(s.size, []).append(np.arange(off, off + s.dim))
            off += s.dim
        soc = {d: np.stack(ix) for d, ix in soc.items()}
        return offsets, soc


def zero(n):
    return ConeSpec([Segment("zero", n)])


def free(n):
    return ConeSpec([Segment("free", n)])


def nonneg(n):
    return ConeSpec([Segment("nonneg", n)])


def soc(n):
    return ConeSpec([Segment("soc", n)])


def psd(side):
    return ConeSpec([Segment("psd", side)])


def dual_cone(spec):
    return ConeSpec([Segment(_DUAL[s.kind], s.size) for s in spec.segments])


# ---------------------------------------------------------------------------
# symmetric vectorization
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)


def _triu(side):
    return np.triu_indices(side)


def svec(X):
    """Scaled upper-triangle vectorization of symmetric matrices (..., s, s)."""
    side = X.shape[-1]
    i, j = _triu(side)
    scale = np.where(i == j, 1.0, _SQRT2)
    return X[..., i, j] * scale


def smat(v, side):
    i, j = _triu(side)
    scale = np.where(i == j, 1.0, 1.0 / _SQRT2)
    X = np.zeros(v.shape[:-1] + (side, side))
    X[..., i, j] = v * scale
    X[..., j, i] = v * scale
    return X


def _psd_project(v, side):
    lam, V = np.linalg.eigh(smat(v, side))
    X = (V * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return svec(X)


def _psd_vjp(v, g, side):
    lam, V = np.linalg.eigh(smat(v, side))
    lp = np.maximum(lam, 0.0)
    li, lj = lam[..., :, None], lam[..., None, :]
    gap = li - lj
    tied = np.abs(gap) < PSD_TIE_TOL
    step = np.where(lam > 0, 1.0, np.where(lam < 0, 0.0, 0.5))
    diff = (lp[..., :, None] - lp[..., None, :]) / np.where(tied, 1.0, gap)
    gamma = np.where(tied, np.broadcast_to(step[..., :, None], gap.shape), diff)
    Vt = np.swapaxes(V, -1, -2)
    inner = Vt @ smat(g, side) @ V
    return svec(V @ (gamma * inner) @ Vt)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def _check(spec, v):
    if v.shape[-1] != spec.dim:
        raise ConfigurationError(f"vector length {v.shape[-1]} != cone dim {spec.dim}")


def project_array(spec, v):
    v = np.asarray(v, dtype=np.float64)
    _check(spec, v)
    out = np.empty_like(v)
    offsets, socs = spec._plan
    for seg, a, b in offsets:
        if seg.kind == "zero":
            out[..., a:b] = 0.0
        elif seg.kind == "free":
            out[..., a:b] = v[..., a:b]
        elif seg.kind == "nonneg":
            out[..., a:b] = np.maximum(v[..., a:b], 0.0)
        elif seg.kind == "psd":
            out[..., a:b] = _psd_project(v[..., a:b], seg.size)
    for d, idx in socs.items():
        block = v[..., idx]
        flat = _kernels.soc_project(np.ascontiguousarray(block.reshape(-1, d)))
        out[..., idx] = flat.reshape(block.shape)
    return out


def project_vjp(spec, v, g):
    """Adjoint of the projection Jacobian at ``v`` applied to ``g``.

    Projection Jacobians are symmetric, so this is also the JVP.
    """
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check(spec, v)
    out = np.empty_like(v)
    offsets, socs = spec._plan
    for seg, a, b in offsets:
        if seg.kind == "zero":
            out[..., a:b] = 0.0
        elif seg.kind == "free":
            out[..., a:b] = g[..., a:b]
        elif seg.kind == "nonneg":
            out[..., a:b] = g[..., a:b] * (v[..., a:b] > 0)
        elif seg.kind == "psd":
            out[..., a:b] = _psd_vjp(v[..., a:b], g[..., a:b], seg.size)
    for d, idx in socs.items():
        vb = v[..., idx]
        gb = g[..., idx]
        flat = _kernels.soc_vjp(
            np.ascontiguousarray(vb.reshape(-1, d)), np.ascontiguousarray(gb.reshape(-1, d))
        )
        out[..., idx] = flat.reshape(vb.shape)
    return out


def project(spec, v):
    """Segmentwise Euclidean projection onto ``spec``; taped when ``v`` is."""
    vd = data_of(v)
    out = project_array(spec, vd)
    return custom_op("cone_project", out, (v,), lambda g: (project_vjp(spec, vd, g),))
