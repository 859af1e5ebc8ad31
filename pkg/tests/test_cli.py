import csv
import io
import json

import numpy as np
import pytest

from mobileone.cli import main
from mobileone.serialize import load_model, save_model


def test_count_prints_totals(capsys):
    assert main(["count", "--variant", "s1"]) == 0
    out = capsys.readouterr().out
    assert "4,764,840" in out
    assert "macs@224" in out


def test_unknown_variant_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["count", "--variant", "s9"])
    assert exc.value.code == 2


def test_missing_input_file_exits_1(capsys):
    assert main(["verify", "--in", "/nonexistent/path.mob1"]) == 1
    assert "error:" in capsys.readouterr().err


def test_build_reparam_verify_flow(tmp_path, capsys):
    train_path = str(tmp_path / "mu0.mob1")
    folded_path = str(tmp_path / "mu0-folded.mob1")

    assert main([
        "build", "--variant", "mu0", "--mode", "train",
        "--out", train_path, "--classes", "10", "--seed", "0",
    ]) == 0
    out = capsys.readouterr().out
    assert "params" in out

    assert main([
        "verify", "--in", train_path, "--trials", "2", "--res", "32",
        "--seed", "1",
    ]) == 0
    assert capsys.readouterr().out.startswith("OK")

    assert main(["reparam", "--in", train_path, "--out", folded_path]) == 0
    capsys.readouterr()

    assert main([
        "verify", "--in", train_path, "--against", folded_path,
        "--trials", "2", "--res", "32", "--seed", "2",
    ]) == 0
    assert capsys.readouterr().out.startswith("OK")

    # one damaged folded weight must flip the against-check to failure
    folded = load_model(folded_path)
    name, arr = next(
        (n, a) for n, a in folded.named_tensors() if n.endswith("weight")
    )
    arr[(0,) * arr.ndim] += 0.5
    save_model(folded, folded_path)
    assert main([
        "verify", "--in", train_path, "--against", folded_path,
        "--trials", "2", "--res", "32", "--seed", "2",
    ]) == 1
    assert capsys.readouterr().out.startswith("FAIL")


def test_reparam_of_folded_input_warns_and_copies(tmp_path, capsys):
    train_path = str(tmp_path / "t.mob1")
    folded_path = str(tmp_path / "f.mob1")
    copied_path = str(tmp_path / "c.mob1")
    main(["build", "--variant", "mu0", "--mode", "train", "--out", train_path,
          "--classes", "4", "--seed", "0"])
    main(["reparam", "--in", train_path, "--out", folded_path])
    capsys.readouterr()
    assert main(["reparam", "--in", folded_path, "--out", copied_path]) == 0
    err = capsys.readouterr().err
    assert "already" in err
    a = load_model(folded_path)
    b = load_model(copied_path)
    for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        np.testing.assert_array_equal(x, y)


def test_bench_ablation_emits_latency_csv(capsys):
    assert main([
        "bench", "--ablation", "relu", "--depth", "2", "--channels", "4",
        "--res", "8", "--iters", "3", "--warmup", "1",
    ]) == 0
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 1
    assert {"min_ns", "median_ns", "p90_ns", "p99_ns", "backend"} <= set(rows[0])
    assert float(rows[0]["min_ns"]) > 0


def test_bench_all_backends_emits_one_row_each(capsys):
    from mobileone.kernels import available_backends

    assert main([
        "bench", "--ablation", "relu", "--depth", "2", "--channels", "4",
        "--res", "8", "--iters", "2", "--warmup", "0", "--backend", "all",
    ]) == 0
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out)))
    assert sorted(r["backend"] for r in rows) == sorted(available_backends())


def test_correlate_prints_rho(capsys):
    assert main(["correlate"]) == 0
    out = capsys.readouterr().out
    assert "rho=" in out and "n=30" in out


def test_correlate_missing_fixture_exits_1(capsys):
    assert main(["correlate", "--fixture", "/nonexistent.csv"]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_toy_runs_one_epoch(tmp_path, capsys):
    cfg = {
        "data": {"classes": 2, "per_class": 8, "res": 8},
        "net": {"channels": [4, 4]},
        "epochs": 1,
        "batch_size": 8,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    log_path = tmp_path / "log.csv"
    assert main([
        "train-toy", "--config", str(cfg_path), "--out", str(log_path),
    ]) == 0
    out = capsys.readouterr().out
    assert "epoch" in out and "val" in out
    with open(log_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "0.1.0" in capsys.readouterr().out
