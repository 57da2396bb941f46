import json
import subprocess
import sys

import pytest

from sireweight.cli import main
from sireweight.filter import read_kept_manifest
from sireweight.reweight import read_metrics

SMALL_FLAGS = ["--d-model", "16", "--microbatches", "2", "--minibatch", "4", "--warmup", "5"]


def _run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def _gen(capsys, path, clean=24, permuted=8, seed=0):
    rc, _, _ = _run(capsys, "gen-data", "--clean", clean, "--permuted", permuted, "--seed", seed, "--seq-len", 12,
                    "--vocab-size", 48, "--n-sentinels", 8, "--out", path)
    assert rc == 0


def _usage_error(capsys, *argv):
    rc, out, err = _run(capsys, *argv)
    assert rc == 2 and out == ""
    assert err.startswith("error[usage]: ") and err.count("\n") == 1
    return err


def test_gen_data_records_mix_and_is_reproducible(tmp_path, capsys):
    rc, out, _ = _run(capsys, "gen-data", "--clean", 70, "--permuted", 30, "--seed", 0, "--out", tmp_path / "a.txt")
    assert rc == 0 and json.loads(out)["samples"] == 100
    _run(capsys, "gen-data", "--clean", 70, "--permuted", 30, "--seed", 0, "--out", tmp_path / "b.txt")
    a = (tmp_path / "a.txt").read_bytes()
    assert a == (tmp_path / "b.txt").read_bytes()
    header = json.loads(a.decode().splitlines()[0][len("#corpus "):])
    assert header["counts"] == {"clean": 70, "permuted": 30, "shifted": 0}


def test_usage_errors(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    _usage_error(capsys, "gen-data", "--permuted", -1, "--out", tmp_path / "x.txt")
    _usage_error(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "r", "--steps", 0)
    err = _usage_error(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "r",
                       "--steps", 2, "--variant", "baseline", "--tau1", 1)
    assert "--tau1" in err
    _usage_error(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "r", "--steps", 2,
                 "--variant", "presence-x")
    _usage_error(capsys)
    assert not (tmp_path / "r").exists()


def test_missing_inputs_are_runtime_errors(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    for argv in (["eval", "--checkpoint", tmp_path / "none.bin", "--corpus", tmp_path / "c.txt"],
                 ["score", "--checkpoint", tmp_path / "none.bin", "--corpus", tmp_path / "c.txt", "--out", "s"],
                 ["filter", "--scores", tmp_path / "none.tsv", "--keep", 1, "--out", tmp_path / "k.txt"]):
        rc, _, err = _run(capsys, *argv)
        assert rc == 1 and err.startswith("error[io]: ") and err.count("\n") == 1


def test_pretrain_mirrored_schedule_and_run_root(tmp_path, capsys, monkeypatch):
    _gen(capsys, tmp_path / "c.txt")
    monkeypatch.setenv("SIRW_RUN_ROOT", str(tmp_path / "runs"))
    common = ["--corpus", tmp_path / "c.txt", "--steps", 4, "--switch-step", 2, "--tau1", 1, "--tau2", -1, *SMALL_FLAGS]
    assert _run(capsys, "pretrain", "--run-dir", "fwd", "--variant", "presence", *common)[0] == 0
    assert _run(capsys, "pretrain", "--run-dir", "inv", "--variant", "presence-i-d", *common)[0] == 0
    fwd = [r["tau"] for r in read_metrics(tmp_path / "runs" / "fwd" / "metrics.tsv")]
    inv = [r["tau"] for r in read_metrics(tmp_path / "runs" / "inv" / "metrics.tsv")]
    assert fwd == [1.0, 1.0, -1.0, -1.0] and inv == [-t for t in fwd]
    rc, _, err = _run(capsys, "pretrain", "--run-dir", "fwd", "--variant", "presence", *common)
    assert rc == 1 and "not empty" in err


def test_replay_is_bitwise_identical(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    _run(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "a", "--steps", 3, *SMALL_FLAGS)
    assert _run(capsys, "replay", "--manifest", tmp_path / "a" / "manifest.json", "--run-dir", tmp_path / "b")[0] == 0
    for name in ("metrics.tsv", "final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_score_filter_report_eval(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    _gen(capsys, tmp_path / "other.txt", clean=10, permuted=0, seed=1)
    _run(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "r", "--steps", 2,
         "--variant", "baseline", *SMALL_FLAGS)
    ckpt = tmp_path / "r" / "final.bin"
    assert _run(capsys, "score", "--checkpoint", ckpt, "--corpus", tmp_path / "c.txt", "--out",
                tmp_path / "s.tsv")[0] == 0
    assert _run(capsys, "filter", "--scores", tmp_path / "s.tsv", "--keep", 32, "--out", tmp_path / "k.txt")[0] == 0
    kept, header = read_kept_manifest(tmp_path / "k.txt")
    assert kept == list(range(32)) and header["N_prime"] == 32
    rc, out, _ = _run(capsys, "si-report", "--clean", tmp_path / "s.tsv", "--corpus", tmp_path / "c.txt",
                      "--provenance", "permuted", "--out", tmp_path / "rep.json")
    rep = json.loads(out)
    assert rc == 0 and rep["n_clean"] == 24 and rep["n_other"] == 8
    assert json.loads((tmp_path / "rep.json").read_text()) == rep
    e1 = _run(capsys, "eval", "--checkpoint", ckpt, "--corpus", tmp_path / "c.txt")[1]
    e2 = _run(capsys, "eval", "--checkpoint", ckpt, "--corpus", tmp_path / "c.txt")[1]
    assert e1 == e2 and json.loads(e1)["samples"] == 32


def test_si_report_clean_vs_clean_split(tmp_path, capsys):
    _gen(capsys, tmp_path / "a.txt", clean=150, permuted=0, seed=1)
    _gen(capsys, tmp_path / "b.txt", clean=150, permuted=0, seed=2)
    _run(capsys, "pretrain", "--corpus", tmp_path / "a.txt", "--run-dir", tmp_path / "r", "--steps", 20,
         "--variant", "baseline", *SMALL_FLAGS)
    for name in ("a", "b"):
        _run(capsys, "score", "--checkpoint", tmp_path / "r" / "final.bin", "--corpus", tmp_path / f"{name}.txt",
             "--out", tmp_path / f"{name}.tsv")
    rep = json.loads(_run(capsys, "si-report", "--clean", tmp_path / "a.tsv", "--other", tmp_path / "b.tsv")[1])
    assert abs(rep["ratio"] - 1.0) < 0.1


def test_eval_vocab_mismatch(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    _run(capsys, "gen-data", "--clean", 4, "--seq-len", 8, "--vocab-size", 64, "--out", tmp_path / "big.txt")
    _run(capsys, "pretrain", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "r", "--steps", 1, *SMALL_FLAGS)
    rc, _, err = _run(capsys, "eval", "--checkpoint", tmp_path / "r" / "final.bin", "--corpus", tmp_path / "big.txt")
    assert rc == 1 and err.startswith("error[value]: ") and "vocab" in err


def test_eval_loss_drops_after_training(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt", clean=32, permuted=0)
    args = ["--corpus", tmp_path / "c.txt", "--variant", "baseline", *SMALL_FLAGS]
    _run(capsys, "pretrain", "--run-dir", tmp_path / "short", "--steps", 1, *args)
    _run(capsys, "pretrain", "--run-dir", tmp_path / "long", "--steps", 150, *args)
    before = json.loads(_run(capsys, "eval", "--checkpoint", tmp_path / "short" / "final.bin",
                             "--corpus", tmp_path / "c.txt")[1])["mean_loss"]
    after = json.loads(_run(capsys, "eval", "--checkpoint", tmp_path / "long" / "final.bin",
                            "--corpus", tmp_path / "c.txt")[1])["mean_loss"]
    assert after < before


def test_sequential_command(tmp_path, capsys):
    _gen(capsys, tmp_path / "c.txt")
    rc, out, _ = _run(capsys, "sequential", "--corpus", tmp_path / "c.txt", "--run-dir", tmp_path / "seq",
                      "--steps", 5, "--keep", 20, *SMALL_FLAGS)
    assert rc == 0 and json.loads(out)["kept"] == 20
    kept, header = read_kept_manifest(tmp_path / "seq" / "kept.txt")
    assert len(kept) == 20 and header["mode"] == "keep_lowest"
    # scorer defaults to 20% of the step budget
    assert len(read_metrics(tmp_path / "seq" / "scorer" / "metrics.tsv")) == 1


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sireweight.cli", "gen-data", "--permuted", "-1", "--out", "x"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2 and proc.stderr.startswith("error[usage]:")
