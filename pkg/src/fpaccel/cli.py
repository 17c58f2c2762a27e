"""``fpaccel`` command line: gen-data, train, eval, baseline, check, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 invariant-suite failure.
"""

import argparse
import itertools
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INVARIANT = 0, 1, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _cap_threads():
    """Apply ``FPACCEL_THREADS`` to the BLAS/numba pools before they start."""
    n = os.environ.get("FPACCEL_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise UsageError("FPACCEL_THREADS must be a positive integer")
    for var in _THREAD_VARS:
        os.environ[var] = n


def _kv_list(text):
    out = {}
    for part in filter(None, (text or "").split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {part!r}")
        out[k.strip()] = v.strip()
    return out


def build_parser():
    p = _Parser(prog="fpaccel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a dataset directory")
    g.add_argument("--family", required=True)
    g.add_argument("--sizes", default="", help="e.g. p=20,q=10")
    g.add_argument("--counts", default="train=100,val=20,test=20")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--overwrite", action="store_true")

    def training_flags(q):
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--config", help="key = value file with training settings")
        q.add_argument("--seed", type=int)
        q.add_argument("--iters", type=int, help="unroll length T")
        q.add_argument("--updates", type=int)
        q.add_argument("--lambda", dest="lam", type=float)
        q.add_argument("--no-tau-norm", action="store_true",
                       help="train on raw residuals; also turns off iterate rescaling "
                            "unless the config sets scale_iterates")
        q.add_argument("--ablation", choices=("none", "hidden", "iterate", "both"))
        q.add_argument("--limit", type=int, help="use at most this many instances per split")
        q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a learned accelerator")
    training_flags(t)

    s = sub.add_parser("sweep", help="train over a small hyperparameter grid")
    training_flags(s)
    s.add_argument("--sweep", required=True, help="e.g. 'lr=1e-3,3e-4;hidden=64,128'")

    e = sub.add_parser("eval", help="plain, AA and learned traces on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--iters", type=int, default=50)
    e.add_argument("--memory", type=int)
    e.add_argument("--limit", type=int)
    e.add_argument("--out", required=True)

    b = sub.add_parser("baseline", help="plain or AA trace on the test split")
    b.add_argument("--data", required=True)
    b.add_argument("--accel", choices=("none", "plain", "aa"), default="none")
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--memory", type=int)
    b.add_argument("--limit", type=int)
    b.add_argument("--out", required=True)

    c = sub.add_parser("check", help="run the invariant suites")
    c.add_argument("--suites", default="projection,gradient,equivalence,embedding")
    c.add_argument("--inject-fault", dest="fault", help="perturb one suite (tests the failure path)")
    c.add_argument("--out", help="also write the report here")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from . import io
    from .problems import DESK_SIZES, FAMILIES, GeneratorConfig

    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose from {', '.join(FAMILIES)}")
    sizes = {}
    for k, v in _kv_list(args.sizes).items():
        if k not in DESK_SIZES[args.family]:
            raise UsageError(f"unknown size {k!r} for {args.family}")
        sizes[k] = float(v) if k == "T" else int(v)
    counts = {k: int(v) for k, v in _kv_list(args.counts).items()}
    unknown = set(counts) - set(io.SPLITS)
    if unknown:
        raise UsageError(f"unknown splits {sorted(unknown)}")
    gcfg = GeneratorConfig(args.family, sizes, args.seed, counts.get("train", 0),
                           counts.get("val", 0), counts.get("test", 0))
    os.makedirs(args.out, exist_ok=True)
    try:
        io.write_dataset(args.out, gcfg, overwrite=args.overwrite)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {sum(gcfg.counts().values())} {args.family} instances to {args.out}")
    return EXIT_OK


def _train_config(args, extra=None):
    from . import io
    from .training import TrainConfig

    kw = io.read_config(args.config, TrainConfig) if args.config else {}
    for flag, key in (("seed", "seed"), ("iters", "T"), ("updates", "updates"), ("lam", "lam"),
                      ("ablation", "ablation")):
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    if args.no_tau_norm:
        kw["tau_norm"] = False
        kw.setdefault("scale_iterates", False)
    kw.update(extra or {})
    return TrainConfig(**kw)


def _load_batches(data, splits, limit=None):
    from . import io
    from .problems import family_batch

    out = {}
    family = None
    for split in splits:
        family, insts = io.load_split(data, split, limit)
        if not insts:
            raise UsageError(f"dataset split {split!r} is empty")
        out[split] = family_batch(family, insts)
    return family, out


def _run_training(cfg, batches, out, command, args, log=True):
    from . import io
    from .training import metrics_csv, train

    os.makedirs(out, exist_ok=True)
    printer = (lambda r: print("update %d train %.6g val %.6g" % (r[0], r[1], r[2]))) if log else None
    model, rows = train(cfg, batches["train"], batches["val"], log=printer)
    io.write_checkpoint(os.path.join(out, "best.ckpt"), model, {"family": cfg.family})
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(rows))
    io.write_config(os.path.join(out, "config.txt"), cfg)
    io.write_manifest(os.path.join(out, "manifest.json"), command, cfg.to_dict(), cfg.seed,
                      {"data": os.path.abspath(args.data)})
    return model, rows


def cmd_train(args):
    family, batches = _load_batches(args.data, ("train", "val"), args.limit)
    cfg = _train_config(args, {"family": family})
    _run_training(cfg, batches, args.out, "train", args)
    return EXIT_OK


def parse_sweep(text):
    grid = {}
    for part in filter(None, text.split(";")):
        k, sep, vals = part.partition("=")
        if not sep:
            raise UsageError(f"bad sweep entry {part!r}")
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not 1 <= len(values) <= 3:
            raise UsageError(f"sweep over {k!r} needs 1 to 3 values")
        grid[k.strip()] = values
    return grid


def cmd_sweep(args):
    from . import io
    from .training import TrainConfig

    family, batches = _load_batches(args.data, ("train", "val"), args.limit)
    grid = parse_sweep(args.sweep)
    types = TrainConfig.field_types()
    for k in grid:
        if k not in types:
            raise UsageError(f"cannot sweep unknown setting {k!r}")
    keys = sorted(grid)
    lines = ["run," + ",".join(keys) + ",best_val_loss"]
    best = None
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        extra = {k: io._parse_value(v, types[k]) for k, v in zip(keys, combo)}
        extra["family"] = family
        cfg = _train_config(args, extra)
        _, rows = _run_training(cfg, batches, os.path.join(args.out, f"run{i:02d}"), "sweep", args,
                                log=False)
        val = min(r[2] for r in rows)
        lines.append(f"{i}," + ",".join(combo) + ",%.17g" % val)
        print(f"run {i}: {dict(zip(keys, combo))} best val {val:.6g}")
        if best is None or val < best[1]:
            best = (i, val)
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    io.write_manifest(os.path.join(args.out, "manifest.json"), "sweep",
                      {"grid": grid, "best_run": best[0]}, args.seed)
    return EXIT_OK


def _write_traces(out, reports, command, config, seed):
    from . import io

    os.makedirs(out, exist_ok=True)
    for name, rep in reports.items():
        rep.to_csv(os.path.join(out, f"{name}.csv"))
    io.write_manifest(os.path.join(out, "manifest.json"), command, config, seed)


def cmd_eval(args):
    from . import io
    from .training import evaluate

    family, batches = _load_batches(args.data, ("test",), args.limit)
    model, meta = io.read_checkpoint(args.checkpoint)
    if meta.get("family") != family:
        raise UsageError(f"checkpoint family {meta.get('family')!r} != dataset family {family!r}")
    reports = evaluate(model, batches["test"], args.iters, args.memory)
    reports = {"plain" if k == "none" else k: v for k, v in reports.items()}
    config = {"family": family, "iters": args.iters, "memory": args.memory,
              "checkpoint": os.path.abspath(args.checkpoint)}
    _write_traces(args.out, reports, "eval", config, None)
    for k, r in reports.items():
        print("%s: mean fp residual at T %.4g" % (k, r.mean("fp_residual")[-1]))
    return EXIT_OK


def cmd_baseline(args):
    from .trace import SolveConfig, solve

    family, batches = _load_batches(args.data, ("test",), args.limit)
    accel = "none" if args.accel == "plain" else args.accel
    rep = solve(batches["test"], SolveConfig(args.iters, accel=accel, memory=args.memory))
    name = "plain" if accel == "none" else "aa"
    config = {"family": family, "iters": args.iters, "accel": accel, "memory": args.memory}
    _write_traces(args.out, {name: rep}, "baseline", config, None)
    print("%s: mean fp residual at T %.4g" % (name, rep.mean("fp_residual")[-1]))
    return EXIT_OK


def cmd_check(args):
    from .checks import SUITES, run_checks

    suites = [s for s in args.suites.split(",") if s]
    bad = set(suites) - set(SUITES)
    if bad or (args.fault and args.fault not in SUITES):
        raise UsageError(f"suites must be among {', '.join(SUITES)}")
    results = run_checks(suites, fault=args.fault)
    lines = [ln for r in results for ln in r.lines()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "check": cmd_check,
}


def main(argv=None):
    try:
        _cap_threads()
        args = build_parser().parse_args(argv)
        from .errors import ConfigurationError, NumericError
    except UsageError as exc:
        print(f"fpaccel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"fpaccel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"fpaccel: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
