"""On-disk formats: problem files, raw sidecars, checkpoints, configs, manifests.

All writers are byte-deterministic for equal inputs (no timestamps, fixed
float formatting, sorted JSON keys).
"""

import hashlib
import json
import os
import platform
from dataclasses import fields

import numpy as np

from . import __version__
from . import problems as pr
from .acceleration import AccelModel, ModelConfig, param_shapes
from .cones import ConeSpec
from .conic import ConicProblem
from .errors import ConfigurationError

PROBLEM_MAGIC = b"FPACCEL-PROBLEM 1\n"
ARRAYS_MAGIC = b"FPACCEL-ARRAYS 1\n"
CHECKPOINT_MAGIC = b"FPACCEL-CHECKPOINT 1\n"
_LE = np.dtype("<f8")


def _read_header(fh, magic):
    if fh.readline() != magic:
        raise ConfigurationError("unrecognized file header")
    meta = {}
    while True:
        line = fh.readline()
        if not line:
            raise ConfigurationError("truncated header")
        line = line.decode().rstrip("\n")
        if line == "end":
            return meta
        k, _, v = line.partition("=")
        meta[k] = v


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


def write_problem(path, problem):
    """Original (unscaled) ``A, b, c`` as little-endian float64 after a text header."""
    A, b, c = problem.original()
    head = f"n={problem.n}\nm={problem.m}\ncones={problem.cones.to_string()}\nend\n"
    with open(path, "wb") as fh:
        fh.write(PROBLEM_MAGIC + head.encode())
        for arr in (A, b, c):
            fh.write(np.ascontiguousarray(arr, dtype=_LE).tobytes())


def read_problem(path):
    with open(path, "rb") as fh:
        meta = _read_header(fh, PROBLEM_MAGIC)
        n, m = int(meta["n"]), int(meta["m"])
        raw = np.frombuffer(fh.read(), dtype=_LE).astype(np.float64)
    if raw.size != m * n + m + n:
        raise ConfigurationError(f"{path}: expected {m * n + m + n} floats, found {raw.size}")
    A = raw[:m * n].reshape(m, n)
    return ConicProblem(A, raw[m * n:m * n + m], raw[m * n + m:], ConeSpec.from_string(meta["cones"]))


def write_arrays(path, **arrays):
    """Named float64 arrays (and scalars) in a simple self-describing layout."""
    head = []
    for k in sorted(arrays):
        a = np.asarray(arrays[k], dtype=np.float64)
        head.append(f"{k}={','.join(str(s) for s in a.shape)}")
    with open(path, "wb") as fh:
        fh.write(ARRAYS_MAGIC + ("\n".join(head) + "\nend\n").encode())
        for k in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[k], dtype=_LE).tobytes())


def read_arrays(path):
    with open(path, "rb") as fh:
        meta = _read_header(fh, ARRAYS_MAGIC)
        raw = np.frombuffer(fh.read(), dtype=_LE).astype(np.float64)
    out, off = {}, 0
    for k, shape in meta.items():
        shp = tuple(int(s) for s in shape.split(",")) if shape else ()
        size = int(np.prod(shp, dtype=np.int64))
        out[k] = raw[off:off + size].reshape(shp)
        off += size
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, model, extra=None):
    cfg = model.config.to_dict()
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    for k in sorted(extra or {}):
        lines.append(f"meta.{k}={extra[k]}")
    for name, shape in param_shapes(model.config):
        lines.append(f"param.{name}={','.join(str(s) for s in shape)}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + ("\n".join(lines) + "\nend\n").encode())
        for name, _ in param_shapes(model.config):
            fh.write(np.ascontiguousarray(model.params[name], dtype=_LE).tobytes())


def read_checkpoint(path):
    """Returns ``(model, meta)``; ``meta`` holds the ``meta.*`` header entries."""
    with open(path, "rb") as fh:
        head = _read_header(fh, CHECKPOINT_MAGIC)
        raw = np.frombuffer(fh.read(), dtype=_LE).astype(np.float64)
    types = {f.name: f.type for f in fields(ModelConfig)}
    kw = {k: _parse_value(v, types[k]) for k, v in head.items() if k in types}
    cfg = ModelConfig(**kw)
    params, off = {}, 0
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        params[name] = raw[off:off + size].reshape(shape).copy()
        off += size
    if off != raw.size:
        raise ConfigurationError(f"{path}: parameter payload does not match the architecture")
    meta = {k[5:]: v for k, v in head.items() if k.startswith("meta.")}
    return AccelModel(cfg, params), meta


# ---------------------------------------------------------------------------
# key=value configs
# ---------------------------------------------------------------------------


def _parse_value(text, typ):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if name == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    try:
        if name == "int":
            return int(text)
        if name == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"cannot parse {text!r} as {name}") from None
    return text


def read_config(path, cls):
    """Parse ``key = value`` lines (``#`` comments allowed) into ``cls`` kwargs."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {k!r}")
            out[k] = _parse_value(v, types[k])
    return out


def write_config(path, obj):
    d = obj.to_dict()
    with open(path, "w") as fh:
        fh.write("".join(f"{k} = {d[k]}\n" for k in sorted(d)))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(path, command, config, seed, extra=None):
    body = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "fpaccel": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        body.update(extra)
    with open(path, "w") as fh:
        json.dump(body, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return body


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)



# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")

_RAW_FIELDS = {
    "lasso": ("F", "g", "mu"),
    "rpca": ("M", "mu", "L_true", "S_true"),
    "kalman": ("y", "Ad", "Bd", "C", "mu", "rho", "x_true"),
    "elastic_net": ("A", "b", "mu", "mu_max", "alpha", "L", "beta", "x_hat"),
}


def instance_arrays(family, inst):
    return {k: getattr(inst, k) for k in _RAW_FIELDS[family]}


def instance_from_arrays(family, a):
    """Rebuild an instance record (with its cone form) from sidecar arrays."""
    f = {k: a[k] if a[k].ndim else float(a[k]) for k in _RAW_FIELDS[family]}
    if family == "lasso":
        cone = pr._l1_least_squares_cone(f["F"], f["g"], f["mu"])
        return pr.LassoInstance(cone, f["F"], f["g"], f["mu"])
    if family == "rpca":
        return pr.RpcaInstance(pr._rpca_cone(f["M"], f["mu"]), **f)
    if family == "kalman":
        cone = pr._kalman_cone(f["y"], f["Ad"], f["Bd"], f["C"], f["mu"], f["rho"])
        return pr.KalmanInstance(cone, **f)
    if family == "elastic_net":
        return pr.ElasticNetInstance(**f)
    raise ConfigurationError(f"unknown family {family!r}")


def _instance_path(root, split, index):
    return os.path.join(root, split, f"{index:05d}")


def write_dataset(root, gcfg, overwrite=False):
    """One problem file plus raw sidecar per instance, and ``manifest.json``."""
    if os.path.exists(os.path.join(root, "manifest.json")) and not overwrite:
        raise FileExistsError(f"{root} already holds a dataset (pass overwrite)")
    counts = gcfg.counts()
    for split in SPLITS:
        if counts[split]:
            os.makedirs(os.path.join(root, split), exist_ok=True)
        for i in range(counts[split]):
            inst = pr.generate(gcfg.family, gcfg.sizes, gcfg.seed, split, i)
            base = _instance_path(root, split, i)
            write_problem(base + ".prob", pr.cone_problem(gcfg.family, inst))
            write_arrays(base + ".raw", **instance_arrays(gcfg.family, inst))
    config = {"family": gcfg.family, "sizes": gcfg.sizes, "counts": counts}
    return write_manifest(os.path.join(root, "manifest.json"), "gen-data", config, gcfg.seed)


def load_split(root, split, limit=None):
    """Returns ``(family, instances)`` for one split of a dataset directory."""
    man = read_manifest(os.path.join(root, "manifest.json"))
    family = man["config"]["family"]
    n = man["config"]["counts"][split]
    if limit is not None:
        n = min(n, limit)
    insts = [
        instance_from_arrays(family, read_arrays(_instance_path(root, split, i) + ".raw"))
        for i in range(n)
    ]
    return family, insts
