import json
import math
import subprocess
import sys

import pytest

from screening_iv.cli import main
from screening_iv.core import read_dataset
from screening_iv.simulator import ScenarioConfig, table2_config, table2_model


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    table2_config(n=1000, seed=31).dump(p)
    return p


@pytest.fixture
def data_path(tmp_path, cfg_path):
    out = tmp_path / "data.csv"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_simulate_writes_valid_csv(data_path, capsys):
    ds = read_dataset(data_path)
    assert len(ds) == 1000
    scr = ds.arm == 1
    assert ds.detected[scr].mean() > 0.5


def test_simulate_prints_summary(tmp_path, cfg_path, capsys):
    main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "d.csv")])
    summary = json.loads(capsys.readouterr().out)
    assert summary["screening"]["n"] + summary["control"]["n"] == 1000


def test_simulate_is_deterministic_and_seed_overrides(tmp_path, cfg_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    main(["simulate", "--config", str(cfg_path), "--out", str(a)])
    main(["simulate", "--config", str(cfg_path), "--out", str(b)])
    main(["simulate", "--config", str(cfg_path), "--out", str(c), "--seed", "5"])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_simulate_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    doc = table2_config().to_json()
    doc["n"] = 0
    bad.write_text(json.dumps(doc))
    out = tmp_path / "x.csv"
    assert main(["simulate", "--config", str(bad), "--out", str(out)]) != 0
    assert "ConfigParseError" in capsys.readouterr().err
    assert not out.exists()


def test_missing_paths_fail_before_work(tmp_path, cfg_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.csv")]) != 0
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "no" / "o.csv")]) != 0


def test_estimate_point_only(data_path, capsys):
    assert main(["estimate", "--data", str(data_path), "--method", "ee", "--time", "7"]) == 0
    docs = json.loads(capsys.readouterr().out)
    assert len(docs) == 1 and docs[0]["estimand"] == "log_theta_ee"
    assert "se" not in docs[0] and "ci_lower" not in docs[0]


def test_estimate_with_bootstrap_to_file(tmp_path, data_path):
    out = tmp_path / "r.json"
    assert main(["estimate", "--data", str(data_path), "--method", "its", "--bootstrap", "10",
                 "--seed", "3", "--out", str(out)]) == 0
    docs = json.loads(out.read_text())
    assert [d["method"] for d in docs] == ["its_abs", "its_prop"]
    for d in docs:
        assert d["ci_lower"] <= d["value"] <= d["ci_upper"]


def test_estimate_recovers_log_theta_at_large_n(tmp_path, capsys):
    cfg = tmp_path / "big.json"
    table2_config(n=100_000, seed=8).dump(cfg)
    data = tmp_path / "big.csv"
    main(["simulate", "--config", str(cfg), "--out", str(data)])
    capsys.readouterr()
    assert main(["estimate", "--data", str(data), "--method", "ee", "--time", "7", "--bootstrap", "20"]) == 0
    d = json.loads(capsys.readouterr().out)[0]
    assert abs(d["value"] - 0.47) < 3 * d["se"]


def _write(path, rows):
    path.write_text("id,arm,detect_time,event_time,event_type\n" + "".join(f"{r}\n" for r in rows))


def test_estimate_partial_failure_exit_code(tmp_path, capsys):
    data = tmp_path / "d.csv"
    # no control cancer deaths: hazard-ratio methods fail, acfr still works
    _write(data, ["0,1,1.0,2.0,3", "1,1,1.5,7.0,0", "2,1,,3.0,4", "3,1,,7.0,0", "4,0,,7.0,0", "5,0,,2.0,4"])
    assert main(["estimate", "--data", str(data), "--method", "all"]) == 0
    docs = {d["method"]: d for d in json.loads(capsys.readouterr().out)}
    assert docs["ee"]["error"] == "InsufficientEvents"
    assert "value" in docs["acfr"]
    assert main(["estimate", "--data", str(data), "--method", "ee,mle"]) != 0


def test_estimate_rejects_invalid_data(tmp_path, capsys):
    data = tmp_path / "d.csv"
    _write(data, ["0,0,1.0,2.0,3"])
    assert main(["estimate", "--data", str(data)]) != 0
    assert "DetectInControlArm" in capsys.readouterr().err


def test_hr_curve_outputs(tmp_path, data_path):
    out = tmp_path / "curve.csv"
    assert main(["hr-curve", "--data", str(data_path), "--grid", "1:7:0.5", "--bootstrap", "10",
                 "--seed", "1", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 1 + 13
    summary = json.loads((tmp_path / "curve.csv.summary.json").read_text())
    assert set(summary) >= {"min_variance", "ivw"}
    assert summary["ivw_hr"] == pytest.approx(math.exp(summary["ivw"]))


def test_hr_curve_bad_grid(tmp_path, data_path, capsys):
    out = tmp_path / "curve.csv"
    assert main(["hr-curve", "--data", str(data_path), "--grid", "7:1:0.05", "--out", str(out)]) != 0
    assert not out.exists()


def test_hr_curve_null_data_ivw_within_interval(tmp_path):
    cfg = tmp_path / "null.json"
    ScenarioConfig(20_000, table2_model(0.0), 7.0, None, 3).dump(cfg)
    data, out = tmp_path / "null.csv", tmp_path / "c.csv"
    main(["simulate", "--config", str(cfg), "--out", str(data)])
    assert main(["hr-curve", "--data", str(data), "--grid", "2:7:1", "--bootstrap", "20", "--out", str(out)]) == 0
    summary = json.loads((tmp_path / "c.csv.summary.json").read_text())
    row = [l.split(",") for l in out.read_text().splitlines()[1:]]
    t_min = summary["min_variance"]["t"]
    lo, hi = next((float(r[4]), float(r[5])) for r in row if float(r[0]) == t_min)
    assert lo <= 0.0 <= hi


def test_sim_study_thread_invariance(tmp_path, cfg_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["sim-study", "--config", str(cfg_path), "--replicates", "4", "--bootstrap", "4", "--time", "5"]
    assert main(base + ["--out", str(a), "--threads", "1"]) == 0
    assert main(base + ["--out", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith("estimator,truth,mean_estimate")


def test_sim_study_requires_two_replicates(tmp_path, cfg_path):
    assert main(["sim-study", "--config", str(cfg_path), "--replicates", "1", "--out", str(tmp_path / "s.csv")]) != 0


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "screening_iv.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "estimate", "hr-curve", "sim-study"):
        assert cmd in r.stdout
