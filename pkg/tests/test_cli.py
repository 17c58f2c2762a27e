import json
import os
import subprocess
import sys

import pytest

from fpaccel.cli import EXIT_INVARIANT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, parse_sweep
from fpaccel.trace import CSV_HEADER, TraceReport


def gen(out, family="lasso", sizes="p=6,q=3", counts="train=12,val=3,test=4", seed=0, *extra):
    return main(["gen-data", "--family", family, "--sizes", sizes, "--counts", counts,
                 "--seed", str(seed), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def lasso_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("lasso")
    assert gen(root) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(lasso_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(lasso_data), "--updates", "4", "--iters", "4",
                 "--out", str(out)]) == EXIT_OK
    return out


def read_trace(path):
    return TraceReport.from_csv(path.read_text())


# --- gen-data --------------------------------------------------------------------------------


def test_gen_data_writes_instances_and_manifest(tmp_path):
    assert gen(tmp_path / "d", counts="train=100,val=0,test=0") == EXIT_OK
    files = sorted(os.listdir(tmp_path / "d" / "train"))
    assert len([f for f in files if f.endswith(".prob")]) == 100
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["config"]["family"] == "lasso"


def test_gen_data_is_byte_identical_per_seed(tmp_path):
    for name in ("a", "b"):
        assert gen(tmp_path / name, "kalman", "n=5", "train=2,val=1,test=1", 9) == EXIT_OK
    for sub in ("train/00000.prob", "train/00001.raw", "test/00000.prob", "manifest.json"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()
    assert gen(tmp_path / "c", "kalman", "n=5", "train=2,val=1,test=1", 10) == EXIT_OK
    assert (tmp_path / "a/train/00000.prob").read_bytes() != (tmp_path / "c/train/00000.prob").read_bytes()


@pytest.mark.parametrize("args", [
    ("rpca", "p=4,q=3,r=9"), ("lasso", "p=0"), ("lasso", "z=3"), ("simplex", ""),
])
def test_gen_data_rejects_bad_sizes(tmp_path, args):
    assert gen(tmp_path / "x", *args) == EXIT_USAGE


def test_gen_data_refuses_existing_dataset(tmp_path):
    assert gen(tmp_path / "d") == EXIT_OK
    assert gen(tmp_path / "d") == EXIT_USAGE
    assert gen(tmp_path / "d", "lasso", "p=6,q=3", "train=12,val=3,test=4", 0, "--overwrite") == EXIT_OK


def test_unknown_command_and_flags_are_usage_errors(tmp_path):
    assert main(["solve"]) == EXIT_USAGE
    assert main(["baseline", "--data", str(tmp_path), "--accel", "broyden", "--out", "x"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


# --- baseline / eval -----------------------------------------------------------------------


def test_baseline_plain_trace_has_one_row_per_iteration(lasso_data, tmp_path):
    assert main(["baseline", "--data", str(lasso_data), "--accel", "plain", "--iters", "50",
                 "--limit", "1", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "plain.csv").read_text()
    assert text.splitlines()[0] == CSV_HEADER
    rep = TraceReport.from_csv(text)
    assert rep.n_instances == 1 and rep.n_iters == 50


@pytest.mark.parametrize("family,sizes,memory", [("lasso", "p=6,q=3", 10), ("elastic_net", "m=6,n=5", 5)])
def test_baseline_aa_memory_default(tmp_path, family, sizes, memory):
    assert gen(tmp_path / "d", family, sizes, "train=0,val=0,test=2") == EXIT_OK
    assert main(["baseline", "--data", str(tmp_path / "d"), "--accel", "aa", "--iters", "30",
                 "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["baseline", "--data", str(tmp_path / "d"), "--accel", "aa", "--iters", "30",
                 "--memory", str(memory), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a/aa.csv").read_bytes() == (tmp_path / "b/aa.csv").read_bytes()


def test_eval_matches_baseline_columns(lasso_data, trained, tmp_path):
    assert main(["eval", "--data", str(lasso_data), "--checkpoint", str(trained / "best.ckpt"),
                 "--iters", "20", "--out", str(tmp_path / "e")]) == EXIT_OK
    assert main(["baseline", "--data", str(lasso_data), "--accel", "aa", "--iters", "20",
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    assert main(["baseline", "--data", str(lasso_data), "--iters", "20",
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("plain", "aa"):
        assert (tmp_path / "e" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()
    neural = read_trace(tmp_path / "e" / "neural.csv")
    assert neural.n_iters == 20 and neural.n_instances == 4


def test_eval_rejects_checkpoint_of_other_family(trained, tmp_path):
    assert gen(tmp_path / "en", "elastic_net", "m=4,n=3", "train=0,val=0,test=1") == EXIT_OK
    assert main(["eval", "--data", str(tmp_path / "en"), "--checkpoint", str(trained / "best.ckpt"),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_eval_reports_numeric_failure(lasso_data, trained, tmp_path):
    from fpaccel import io

    model, meta = io.read_checkpoint(trained / "best.ckpt")
    for k in model.params:
        model.params[k][...] = float("nan")
    io.write_checkpoint(tmp_path / "bad.ckpt", model, meta)
    assert main(["eval", "--data", str(lasso_data), "--checkpoint", str(tmp_path / "bad.ckpt"),
                 "--iters", "5", "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


# --- train / sweep ---------------------------------------------------------------------------


def test_train_outputs(trained):
    names = set(os.listdir(trained))
    assert {"best.ckpt", "metrics.csv", "config.txt", "manifest.json"} <= names
    assert (trained / "metrics.csv").read_text().startswith("update,train_loss,val_loss")


def test_train_is_byte_identical(lasso_data, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", str(lasso_data), "--updates", "3", "--iters", "3",
                     "--seed", "2", "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("best.ckpt", "metrics.csv", "config.txt", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_config_file_and_overrides(lasso_data, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("hidden = 8\nmlp_hidden = 8\nupdates = 2\nT = 3\n")
    assert main(["train", "--data", str(lasso_data), "--config", str(cfg), "--iters", "2",
                 "--no-tau-norm", "--lambda", "0.5", "--out", str(tmp_path / "o")]) == EXIT_OK
    text = (tmp_path / "o" / "config.txt").read_text()
    for line in ("T = 2", "hidden = 8", "lam = 0.5", "tau_norm = False", "scale_iterates = False"):
        assert line in text.splitlines()
    bad = tmp_path / "bad.txt"
    bad.write_text("lam = 3\n")
    assert main(["train", "--data", str(lasso_data), "--config", str(bad),
                 "--out", str(tmp_path / "p")]) == EXIT_USAGE


def test_sweep_grid(lasso_data, tmp_path):
    assert main(["sweep", "--data", str(lasso_data), "--updates", "2", "--iters", "2",
                 "--sweep", "lr=1e-3,1e-2;hidden=4", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "run,hidden,lr,best_val_loss" and len(lines) == 3
    assert (tmp_path / "run01" / "best.ckpt").exists()
    assert main(["sweep", "--data", str(lasso_data), "--sweep", "lr=1,2,3,4",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["sweep", "--data", str(lasso_data), "--sweep", "colour=1",
                 "--out", str(tmp_path / "y")]) == EXIT_USAGE


def test_parse_sweep():
    assert parse_sweep("a=1,2; b=x") == {"a": ["1", "2"], "b": ["x"]}


# --- check --------------------------------------------------------------------------------


def test_check_passes_and_writes_report(tmp_path):
    out = tmp_path / "r" / "check.txt"
    assert main(["check", "--suites", "projection,equivalence", "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert "PASS projection" in text and "PASS equivalence" in text


@pytest.mark.parametrize("suite", ["projection", "equivalence"])
def test_check_fault_injection_exits_3(suite, capsys):
    assert main(["check", "--suites", suite, "--inject-fault", suite]) == EXIT_INVARIANT
    assert f"FAIL {suite}" in capsys.readouterr().out


def test_check_rejects_unknown_suite():
    assert main(["check", "--suites", "everything"]) == EXIT_USAGE


# --- environment -------------------------------------------------------------------------


def test_thread_cap_is_applied_in_a_fresh_process(tmp_path):
    code = ("import os, sys; from fpaccel.cli import main; "
            "rc = main(['check', '--suites', 'equivalence']); "
            "print(os.environ.get('OMP_NUM_THREADS'), os.environ.get('OPENBLAS_NUM_THREADS')); sys.exit(rc)")
    env = {**os.environ, "FPACCEL_THREADS": "1"}
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == EXIT_OK
    assert res.stdout.strip().splitlines()[-1] == "1 1"
    env["FPACCEL_THREADS"] = "zero"
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE


def test_console_script_module_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fpaccel.cli", "check", "--suites", "projection"],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_OK and "PASS projection" in res.stdout
