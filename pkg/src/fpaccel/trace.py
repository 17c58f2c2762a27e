"""Residual traces of accelerated solves and their CSV form."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acceleration import make_accel, run
from .conic import ProblemBatch, as_batch
from .errors import ConfigurationError

METRICS = ("fp_residual", "primal", "dual", "gap", "tau")
CSV_HEADER = "iter," + ",".join(METRICS)


@dataclass
class TraceReport:
    """Per-iteration residuals of a batch solve, each metric a (B, T) array.

    Rows past an instance's stopping iteration are NaN. ``r0`` holds the
    residual of the default start after one map application per instance.
    """

    metrics: dict
    r0: np.ndarray
    accel: str = "none"
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lengths is None:
            fp = self.metrics["fp_residual"]
            self.lengths = np.full(fp.shape[0], fp.shape[1])

    @property
    def n_instances(self):
        return self.metrics["fp_residual"].shape[0]

    @property
    def n_iters(self):
        return self.metrics["fp_residual"].shape[1]

    def __getitem__(self, name):
        return self.metrics[name]

    def normalized(self):
        """Fixed-point residuals divided by each instance's ``r0``."""
        return self.metrics["fp_residual"] / self.r0[:, None]

    def mean(self, name):
        return _nan_stat(np.nanmean, self.metrics[name])

    def std(self, name):
        return _nan_stat(np.nanstd, self.metrics[name])

    def to_csv(self, path=None):
        lines = [CSV_HEADER]
        for k in range(self.n_instances):
            lines.append(f"# block instance {k}")
            lines += _rows(self.n_iters, [self.metrics[m][k] for m in METRICS])
        lines.append("# block mean")
        lines += _rows(self.n_iters, [self.mean(m) for m in METRICS])
        lines.append("# block std")
        lines += _rows(self.n_iters, [self.std(m) for m in METRICS])
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text, accel="none"):
        blocks, current = {}, None
        for line in text.splitlines()[1:]:
            if line.startswith("# block "):
                current = line[len("# block "):]
                blocks[current] = []
            elif line:
                blocks[current].append([float(v) for v in line.split(",")[1:]])
        inst = [np.array(v) for k, v in blocks.items() if k.startswith("instance")]
        arr = np.stack(inst)
        metrics = {m: arr[:, :, i] for i, m in enumerate(METRICS)}
        lengths = np.sum(np.isfinite(metrics["fp_residual"]), axis=1)
        return cls(metrics, metrics["fp_residual"][:, 0].copy(), accel, lengths)


def _nan_stat(fn, a):
    out = np.full(a.shape[1], np.nan)
    ok = np.isfinite(a).any(axis=0)
    if ok.any():
        out[ok] = fn(a[:, ok], axis=0)
    return out


def _fmt(v):
    return "nan" if not np.isfinite(v) else "%.17g" % v


def _rows(T, cols):
    return [f"{t + 1}," + ",".join(_fmt(c[t]) for c in cols) for t in range(T)]


@dataclass
class SolveConfig:
    max_iters: int = 50
    tol: float = None  # None or inf disables early stopping
    accel: str = "none"
    memory: int = None  # None picks the family default
    normalize: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.accel not in ("none", "aa", "neural"):
            raise ConfigurationError(f"unknown accelerator {self.accel!r}")


def default_memory(batch):
    return 10 if isinstance(batch, ProblemBatch) else 5


def initial_residual(batch, normalize=True):
    x0 = batch.default_iterate()
    return np.asarray(batch.residual(x0, batch.fmap(x0), normalize))


def solve(problems, config=None, model=None):
    """Run the accelerated fixed-point loop and record residuals each iteration.

    ``problems`` is a family batch, a cone problem, or a list of cone
    problems. Row ``t`` of the report describes iterate ``x_t``: its residual
    ``||x_t - f(x_t)||`` together with primal/dual residuals, gap and tau.
    """
    cfg = config or SolveConfig()
    batch = problems if hasattr(problems, "fmap") else as_batch(problems)
    memory = cfg.memory or default_memory(batch)
    context = batch.context() if cfg.accel == "neural" else None
    accel = make_accel(cfg.accel, memory, model, context)
    tol = np.inf if cfg.tol is None else cfg.tol
    B = len(batch)
    T = cfg.max_iters
    rec = {m: np.full((B, T), np.nan) for m in METRICS}
    lengths = np.full(B, T)
    active = np.ones(B, dtype=bool)

    def observe(t, x, xt):
        vals = batch.metrics(x, xt, cfg.normalize)
        for m in METRICS:
            rec[m][active, t - 1] = vals[m][active]
        done = active & (vals["fp_residual"] <= tol) if np.isfinite(tol) else active & False
        lengths[done] = t
        active[done] = False
        return not active.any()

    run(batch.fmap, batch.default_iterate(), T, accel, observe)
    return TraceReport(rec, initial_residual(batch, cfg.normalize), cfg.accel, lengths)


def final_iterate(problems, config=None, model=None):
    """Iterate ``x_{T+1}`` after ``max_iters`` accelerated steps."""
    cfg = config or SolveConfig()
    batch = problems if hasattr(problems, "fmap") else as_batch(problems)
    memory = cfg.memory or default_memory(batch)
    context = batch.context() if cfg.accel == "neural" else None
    xs = run(batch.fmap, batch.default_iterate(), cfg.max_iters,
             make_accel(cfg.accel, memory, model, context))
    return ad.data_of(xs[-1])
