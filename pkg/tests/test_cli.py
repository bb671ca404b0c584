import json

import numpy as np
import pytest

from deltaformer.cli import parse_grid, run_cli
from deltaformer.data import TimeSeriesDataset, write_csv_dataset
from deltaformer.errors import ConfigurationError, ReportIOError
from deltaformer.report import emit_report, read_report, strip_volatile

TINY = ["--lookback", "16", "--horizon", "4", "--patch-len", "4", "--d-patch", "4", "--epochs", "1"]


@pytest.fixture
def csv_path(tmp_path):
    t = np.arange(300, dtype=float)
    ds = TimeSeriesDataset("toy", np.stack([np.sin(t / 4), np.cos(t / 9)]), ["a", "b"])
    write_csv_dataset(ds, tmp_path / "toy.csv")
    return str(tmp_path / "toy.csv")


def test_parse_grid():
    assert parse_grid("256:4096:x2") == [256, 512, 1024, 2048, 4096]
    assert parse_grid("0:0.8:0.2", float) == [0.0, 0.2, 0.4, 0.6, 0.8]
    assert parse_grid("1,3") == [1, 3]
    with pytest.raises(ConfigurationError):
        parse_grid("1:8:x1")


# -- reports ----------------------------------------------------------------------------

def test_json_report_payload(tmp_path):
    path = emit_report({"mse": 0.385}, tmp_path / "r.json", {"seed": 1})
    assert '"mse": 0.385' in open(path).read()
    back = read_report(path)
    assert back["schema_version"] == 1 and back["manifest"]["seed"] == 1


def test_csv_round_trip_full_precision(tmp_path):
    rows = [{"arch": "delta", "C_or_p": 0.2, "seed": 0, "metric": "growth", "value": 1 / 3}]
    emit_report(rows, tmp_path / "r.csv", {"seed": 0})
    assert read_report(tmp_path / "r.csv")["results"] == rows


def test_empty_sweep_is_header_only(tmp_path):
    emit_report([], tmp_path / "e.csv", {}, ["arch", "C_or_p", "seed", "metric", "value"])
    body = [l for l in open(tmp_path / "e.csv").read().splitlines() if not l.startswith("# ")]
    assert body == ["arch,C_or_p,seed,metric,value"]


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportIOError):
        emit_report({"a": 1}, blocker / "sub" / "r.json")


# -- subcommands --------------------------------------------------------------------------

def test_train_then_eval(tmp_path, csv_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("layers = 1  # small\nbatch_size = 64\n")
    out = tmp_path / "run"
    assert run_cli(["train", "--data", csv_path, "--arch", "delta", "--config", str(cfg), "--out", str(out),
                    *TINY]) == 0
    metrics = read_report(out / "metrics.json")
    assert metrics["manifest"]["config_hash"] and metrics["manifest"]["data_checksum"]
    assert {"mse", "mae", "last_mse", "mean_mse"} <= set(metrics["results"]["test"][0])
    assert run_cli(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--data", csv_path,
                    "--out", str(out)]) == 0
    ev = read_report(out / "eval.json")
    assert ev["results"]["test"][0]["mse"] == metrics["results"]["test"][0]["mse"]


def test_train_reports_are_deterministic(tmp_path, csv_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(["train", "--data", csv_path, "--out", str(out), "--seed", "3", *TINY]) == 0
        reports.append(strip_volatile(read_report(out / "metrics.json")))
    assert reports[0] == reports[1]


def test_unknown_flag_is_usage_error(capsys, csv_path):
    assert run_cli(["train", "--data", csv_path, "--frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_machine_readable_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,x\n0,1\n1,zz\n")
    code = run_cli(["train", "--data", str(bad), "--out", str(tmp_path)])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code != 0 and err["error"] == "ingestion" and "line 3" in err["message"]


def test_unknown_config_key_exit(tmp_path, csv_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lernrate = 1\n")
    assert run_cli(["train", "--data", csv_path, "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "configuration"


def test_gradcheck_subcommand(capsys, tmp_path):
    assert run_cli(["gradcheck", "--arch", "variate", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert "max_rel_error" in capsys.readouterr().out
    assert read_report(tmp_path / "gradcheck.json")["results"]["cases"][0]["passed"]


def test_profile_subcommand(tmp_path):
    assert run_cli(["profile", "--archs", "delta,full,variate", "--c-grid", "8:32:x2", "--patch-len", "4",
                    "--d-patch", "8", "--out", str(tmp_path)]) == 0
    table = read_report(tmp_path / "scaling.csv")["results"]
    assert {r["arch"] for r in table} == {"delta", "full", "variate_only"}
    assert set(table[0]) == {"arch", "C", "L", "P", "analytic_elements", "peak_bytes", "params"}
    summary = read_report(tmp_path / "scaling.json")["results"]
    assert summary["archs"]["delta"]["exponent"] > 0


def test_keyretrieval_subcommand(tmp_path):
    args = ["synth-keyretrieval", "--archs", "delta,variate", "--c-grid", "6", "--n-keys", "2",
            "--steps", "200", "--seeds", "0", "--lookback", "20", "--horizon", "10", "--patch-len", "5",
            "--d-patch", "4", "--epochs", "1", "--out", str(tmp_path)]
    assert run_cli(args) == 0
    rows = read_report(tmp_path / "keyretrieval.csv")["results"]
    assert {r["metric"] for r in rows} == {"key_mass", "key_mass_first_layer", "test_mse"}
    summary = read_report(tmp_path / "keyretrieval.json")["results"]
    assert summary["uniform_floor"]["6"] == pytest.approx(2 / 6)


def test_noise_sweep_subcommand(tmp_path, csv_path):
    args = ["noise-sweep", "--data", csv_path, "--archs", "delta", "--p-grid", "0,0.4", "--seeds", "0",
            *TINY, "--out", str(tmp_path)]
    assert run_cli(args) == 0
    rows = read_report(tmp_path / "noise.csv")["results"]
    assert [r["value"] for r in rows if r["metric"] == "growth" and r["C_or_p"] == 0] == [0.0]
