import csv
import json
import math

import numpy as np
import pytest

from detflow import cli, flows, operators as O
from detflow.diffgraph import save_checkpoint


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_counts():
    assert cli.parse_grid("1e5") == (100_000,)
    assert cli.parse_grid("1e2,1e3,10000") == (100, 1000, 10_000)
    with pytest.raises(Exception):
        cli.parse_count("1.5")


def test_experiment_spec_invariants():
    with pytest.raises(ValueError):
        cli.ExperimentSpec(samples=(1000, 100))
    with pytest.raises(ValueError):
        cli.ExperimentSpec(trials=0)
    spec = cli.ExperimentSpec.from_dict({"fixture": "A1", "flow": flows.dense_spec(10).to_dict()})
    assert spec.flow == flows.dense_spec(10) and spec.samples == cli.DEFAULT_GRID


def test_estimate_identity(tmp_path, capsys):
    assert cli.main(["estimate", "--fixture", "identity10", "--method", "mc", "--samples", "1e3",
                     "--out-dir", str(tmp_path)]) == 0
    (row,) = read_rows(tmp_path / "results.csv")
    assert float(row["det_estimate"]) == pytest.approx(1.0, abs=1e-12)
    assert float(row["rel_abs_diff"]) == pytest.approx(0.0, abs=1e-12)
    assert "MC" in capsys.readouterr().out
    assert (tmp_path / "summary.txt").exists()


def test_estimate_a1_row(tmp_path):
    assert cli.main(["estimate", "--fixture", "A1", "--method", "mc", "--samples", "1e5", "--seed", "7",
                     "--out-dir", str(tmp_path)]) == 0
    (row,) = read_rows(tmp_path / "results.csv")
    assert set(cli.RESULT_FIELDS) == set(row)
    truth = math.exp(O.oracle_logabsdet(O.load_fixture("A1")))
    assert float(row["rel_abs_diff"]) == pytest.approx(abs(float(row["det_estimate"]) - truth) / truth)
    assert row["seed"] == "7" and row["N"] == "100000"


def test_estimate_is_reproducible_and_env_seed(tmp_path, monkeypatch):
    args = ["estimate", "--fixture", "A2", "--samples", "1e2,1e3", "--trials", "2"]
    cli.main(args + ["--seed", "3", "--out-dir", str(tmp_path / "a")])
    cli.main(args + ["--seed", "3", "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
    monkeypatch.setenv("DETFLOW_SEED", "3")
    cli.main(args + ["--seed", "99", "--out-dir", str(tmp_path / "c")])
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "c/results.csv").read_bytes()


def test_untrained_checkpoint_vde_equals_mc(tmp_path):
    spec = flows.dense_spec(10)
    ck = tmp_path / "ck.json"
    save_checkpoint(ck, flows.init_params(spec, 0), 0, flow_spec=spec.to_dict())
    assert cli.main(["estimate", "--fixture", "A3", "--method", "both", "--checkpoint", str(ck),
                     "--samples", "1e2,1e3", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "results.csv")
    for n in ("100", "1000"):
        mc = [r for r in rows if r["N"] == n and r["method"] == "mc"][0]
        vde = [r for r in rows if r["N"] == n and r["method"] == "vde"][0]
        assert mc["det_estimate"] == vde["det_estimate"]


def test_exit_codes(tmp_path):
    out = ["--out-dir", str(tmp_path)]
    assert cli.main(["estimate", "--fixture", "A1", "--method", "vde"] + out) == cli.EXIT_MISSING
    assert cli.main(["estimate", "--fixture", "A1", "--method", "vde",
                     "--checkpoint", str(tmp_path / "nope.json")] + out) == cli.EXIT_MISSING
    sing = tmp_path / "sing.json"
    sing.write_text(json.dumps({"type": "dense", "entries": [[1.0, 2.0], [2.0, 4.0]]}))
    assert cli.main(["estimate", "--operator-file", str(sing)] + out) == cli.EXIT_OPERATOR
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"type": "dense", "entries": [[1.0, 2.0, 3.0]]}))
    assert cli.main(["estimate", "--operator-file", str(bad)] + out) == cli.EXIT_OPERATOR
    assert cli.main(["estimate", "--operator-file", str(tmp_path / "missing.json")] + out) == cli.EXIT_MISSING
    assert cli.main(["table", "table2", "--samples", "1e2"] + out) == cli.EXIT_MISSING


def test_train_divergence_exit_code(tmp_path, monkeypatch):
    from detflow import train

    monkeypatch.setattr(train, "DIVERGENCE_NATS", -1.0)
    monkeypatch.setattr(train, "DIVERGENCE_PATIENCE", 2)
    code = cli.main(["train", "--fixture", "cover3x3", "--iterations", "20", "--batch-size", "16",
                     "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_DIVERGED
    assert (tmp_path / "checkpoint.json").exists() and (tmp_path / "trace.csv").exists()


def _strip_elapsed(path):
    return [r[:3] for r in csv.reader(open(path))]


def test_train_then_estimate(tmp_path):
    args = ["train", "--fixture", "cover3x3", "--profile", "desk", "--seed", "1",
            "--iterations", "150", "--batch-size", "128"]
    assert cli.main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    trace = _strip_elapsed(tmp_path / "a/trace.csv")
    assert trace == _strip_elapsed(tmp_path / "b/trace.csv")
    obj = np.array([float(r[1]) for r in trace[1:]])
    assert obj[-20:].mean() < obj[:20].mean()
    ck = json.loads((tmp_path / "a/checkpoint.json").read_text())
    assert ck["flow_spec"]["masking"] == "autoregressive" and ck["step"] == 150
    assert cli.main(["estimate", "--fixture", "cover3x3", "--method", "both", "--samples", "1e3",
                     "--checkpoint", str(tmp_path / "a/checkpoint.json"),
                     "--out-dir", str(tmp_path / "e")]) == 0
    rows = read_rows(tmp_path / "e/results.csv")
    ess = {r["method"]: float(r["ess"]) for r in rows}
    assert ess["mc"] < ess["vde"]


def test_table_with_checkpoint_dir(tmp_path):
    spec = flows.dense_spec(16)
    ck_dir = tmp_path / "ck"
    ck_dir.mkdir()
    save_checkpoint(ck_dir / "checkpoint.json", flows.init_params(spec, 0), 0, flow_spec=spec.to_dict())
    assert cli.main(["table", "table2", "--samples", "1e2,1e3", "--trials", "3",
                     "--checkpoint-dir", str(ck_dir), "--out-dir", str(tmp_path / "t")]) == 0
    rows = read_rows(tmp_path / "t/results.csv")
    assert len(rows) == 2 * 2 * 3
    text = (tmp_path / "t/summary.txt").read_text()
    assert "true log det 2.0455" in text
    assert (tmp_path / "t/figure_estimate.csv").read_text().startswith("# log-log")


def test_table1_std_column(tmp_path):
    # one fixture with an untrained proposal: exercises the table layout quickly
    spec = flows.dense_spec(10)
    ck_dir = tmp_path / "ck"
    ck_dir.mkdir()
    save_checkpoint(ck_dir / "checkpoint.json", flows.init_params(spec, 0), 0, flow_spec=spec.to_dict())
    assert cli.main(["table", "table1", "--fixture", "A1", "--samples", "1e2,1e3", "--trials", "3",
                     "--checkpoint-dir", str(ck_dir), "--out-dir", str(tmp_path / "t")]) == 0
    text = (tmp_path / "t/summary.txt").read_text()
    assert text.count("±") == 4
