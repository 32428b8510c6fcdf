import csv
import os

import pytest

from pqdk.checkpoint import load_checkpoint
from pqdk.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, read_manifest

DATA = "synthetic:k=3,train=8,test=4,size=8"
FAST = ["--warmups", "1", "--repeats", "3"]
ORDER = "prune:0.5:1,qat:1,kd:1"


@pytest.fixture(scope="module")
def baseline(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    assert main(["train-baseline", "--data", DATA, "--epochs", "1", "--out", str(out)]) == EXIT_OK
    return out


def test_train_baseline_writes_checkpoint(baseline):
    ckpt = load_checkpoint(baseline / "ckpt.pqdk")
    assert ckpt.meta["data"] == DATA
    assert {"command", "argv", "dataset_checksum", "threads"} <= set(read_manifest(baseline / "manifest.txt"))


def test_zero_epochs_saves_initial_model(tmp_path):
    assert main(["train-baseline", "--data", DATA, "--epochs", "0", "--out", str(tmp_path)]) == EXIT_OK
    assert os.path.exists(tmp_path / "ckpt.pqdk")


def test_train_baseline_is_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["train-baseline", "--data", DATA, "--epochs", "1", "--seed", "4", "--out", str(tmp_path / d)])
    assert (tmp_path / "a/ckpt.pqdk").read_bytes() == (tmp_path / "b/ckpt.pqdk").read_bytes()


def test_pipeline_layout_and_rerun(baseline, tmp_path):
    argv = ["pipeline", "--baseline", str(baseline / "ckpt.pqdk"), "--order", ORDER, "--batch-size", "8",
            "--out", str(tmp_path), *FAST]
    assert main(argv) == EXIT_OK
    run = tmp_path / "prune50-qat-kd" / "0"
    assert {"ckpt.pqdk", "metrics.csv", "epochs.csv", "manifest.txt", "record.json"} <= set(os.listdir(run))
    first = (run / "ckpt.pqdk").read_bytes()
    assert main(["rerun", str(run / "manifest.txt")]) == EXIT_OK
    assert (run / "ckpt.pqdk").read_bytes() == first
    rows = list(csv.DictReader(open(run / "epochs.csv")))
    assert [r["stage"] for r in rows] == ["prune", "qat", "kd"]


def test_ablate_four_orders_then_report(baseline, tmp_path):
    argv = ["ablate", "--baseline", str(baseline / "ckpt.pqdk"), "--budgets", ORDER, "--seeds", "1",
            "--batch-size", "8", "--out", str(tmp_path), *FAST]
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 4
    assert len({r["size_bytes"] for r in rows}) == 1
    assert main(["report", "--runs", str(tmp_path), "--pareto"]) == EXIT_OK
    assert main(["report", "--runs", str(tmp_path), "--format", "json"]) == EXIT_OK


def test_bench_computes_speedup(baseline, tmp_path):
    main(["pipeline", "--baseline", str(baseline / "ckpt.pqdk"), "--order", "qat:0", "--batch-size", "8",
          "--out", str(tmp_path / "runs"), *FAST])
    argv = ["bench", "--ckpt", str(tmp_path / "runs/qat/0/ckpt.pqdk"), "--baseline-ckpt",
            str(baseline / "ckpt.pqdk"), "--batch", "4", "--warmups", "1", "--repeats", "3", "--out",
            str(tmp_path / "bench")]
    assert main(argv) == EXIT_OK
    row = next(csv.DictReader(open(tmp_path / "bench/metrics.csv")))
    assert float(row["speedup_x"]) > 0


def test_bench_rejects_single_repeat(baseline, tmp_path):
    argv = ["bench", "--ckpt", str(baseline / "ckpt.pqdk"), "--repeats", "1", "--out", str(tmp_path)]
    assert main(argv) == EXIT_CONFIG


def test_empty_report_is_header_only(tmp_path, capsys):
    assert main(["report", "--runs", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip().startswith("method,acc_pct")


def test_exit_codes(baseline, tmp_path):
    assert main(["pipeline", "--baseline", str(baseline / "ckpt.pqdk"), "--order", "qat:1,qat:1",
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["pipeline", "--baseline", str(tmp_path / "missing.pqdk"), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["no-such-command"]) == EXIT_CONFIG
