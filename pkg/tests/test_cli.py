import csv
import json

import pytest

from loraserve import cli


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_verify_sgmv_pass(capsys):
    assert cli.main(["verify-sgmv", "--trials", "40"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_verify_sgmv_fault(capsys):
    assert cli.main(["verify-sgmv", "--trials", "3", "--inject-fault"]) == 1
    out = capsys.readouterr().out
    assert "FAIL trial=0" in out and "max_dev=1.000e-06" in out


def test_verify_sgmv_zero_trials(capsys):
    assert cli.main(["verify-sgmv", "--trials", "0"]) == 0
    assert "warning" in capsys.readouterr().err


def test_verify_sgmv_negative_trials():
    assert cli.main(["verify-sgmv", "--trials", "-1"]) == 2


def test_random_case_respects_limits():
    import numpy as np
    rng = np.random.default_rng(0)
    for t in range(200):
        b = cli.random_case(rng, cli.POPULARITIES[t % 4])
        m = b.models[0]
        assert b.segments.n <= 8 and b.segments.total <= 64
        assert m.h1 in cli.HIDDEN_CHOICES and m.h2 in cli.HIDDEN_CHOICES and m.rank in cli.RANK_CHOICES


def test_roofline(tmp_path):
    assert cli.main(["--out", str(tmp_path), "roofline"]) == 0
    rows = read_csv(tmp_path / "roofline.csv")
    assert list(rows[0]) == list(cli.ROOFLINE_HEADER)
    assert len(rows) == 4 * 64
    last = [r for r in rows if r["distribution"] == "distinct" and r["batch_size"] == "64"][0]
    assert int(last["flop"]) == 8_388_608 and int(last["io_bytes"]) == 8_914_944
    ident = [float(r["intensity"]) for r in rows if r["distribution"] == "identical"]
    assert all(b > a for a, b in zip(ident, ident[1:]))


def test_simulate_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text("workload:\n  num_requests: 50\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "--seed", "3", "simulate"]) == 0
    rows = read_csv(tmp_path / "steps.csv")
    assert list(rows[0]) == ["time", "gpu", "batch_size", "tokens_emitted", "queue_depth"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["finished"] == 50 and summary["mode"] == "punica"
    tput = read_csv(tmp_path / "throughput.csv")
    assert list(tput[0]) == ["window_start", "tokens_per_s"]
    first = (tmp_path / "steps.csv").read_text()
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "--seed", "3", "simulate"]) == 0
    assert (tmp_path / "steps.csv").read_text() == first


def test_simulate_baseline_prefix(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text("workload:\n  num_requests: 20\n  popularity: distinct\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "simulate", "--mode", "baseline", "--prefix"]) == 0
    assert json.loads((tmp_path / "baseline_summary.json").read_text())["median_batch_size"] == 1


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("scheduler:\n  max_batch: -4\n")
    assert cli.main(["--config", str(cfg), "simulate"]) == 2
    assert f"{cfg}:2:" in capsys.readouterr().err


def test_compare_small(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text("workload:\n  num_requests: 60\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "compare",
                     "--distributions", "distinct", "identical", "--jobs", "2"]) == 0
    rows = {r["distribution"]: r for r in read_csv(tmp_path / "compare.csv")}
    assert float(rows["identical"]["ratio"]) == pytest.approx(1.0)
    assert float(rows["distinct"]["ratio"]) > 1.0


def test_parallel_matches_serial():
    from loraserve.config import load_config
    cfg = load_config(overrides={"workload": {"num_requests": 30}})
    assert cli.compare(cfg, ["skewed"], jobs=1) == cli.compare(cfg, ["skewed"], jobs=2)
