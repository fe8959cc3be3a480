import json
import subprocess
import sys

import pytest

from noma_aoi import experiment as ex
from noma_aoi.cli import main

QUICK = """
train.episodes = 1
train.slots = 100
train.replay_threshold = 40
train.hidden = 16
eval.episodes = 2
eval.horizon = 1000
policies = fixed,raw
"""

TINY = """
env.n_users = 2
env.m_levels = 8
env.aoi_cap = 20
env.distances = 1.5,2.0
policies.fixed_levels = 2,6
eval.episodes = 2
eval.horizon = 2000
"""


@pytest.fixture
def quick_cfg(tmp_path):
    p = tmp_path / "quick.cfg"
    p.write_text(QUICK)
    return p


def test_sweep_writes_csv_and_resolved_config(tmp_path, quick_cfg, capsys):
    out = tmp_path / "run"
    assert main(["sweep", "--config", str(quick_cfg), "--out", str(out), "--snr-db", "10,20", "--seed", "4"]) == 0
    rows = ex.read_records(out / "sweep.csv")
    assert [(r.snr_db, r.policy) for r in rows] == [(10.0, "fixed"), (10.0, "raw"), (20.0, "fixed"), (20.0, "raw")]
    resolved = ex.parse_config(out / "resolved_config.cfg")
    assert resolved.seed == 4 and resolved.sweep == [10.0, 20.0]
    assert (out / "sweep.csv").read_bytes().count(b"\r") == 0


def test_train_then_evaluate_with_saved_net(tmp_path, quick_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(quick_cfg), "--out", str(out), "--snr-db", "12", "--policy", "raw"]) == 0
    net = capsys.readouterr().out.strip()
    assert net.endswith("net_raw_12dB.txt")
    assert (out / "curve_raw_12dB.csv").exists()
    assert main(["evaluate", "--config", str(quick_cfg), "--out", str(out), "--snr-db", "12",
                 "--policy", "raw", "--net", net]) == 0
    (rec,) = ex.read_records(out / "metrics_raw.csv")
    assert rec.policy == "raw" and rec.slots == 2 * 900


def test_oracle_and_histogram(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    out = tmp_path / "run"
    assert main(["oracle", "--config", str(cfg), "--out", str(out), "--snr-db", "5"]) == 0
    table = (out / "oracle_policy_5dB.csv").read_text().splitlines()
    assert len(table) == 1 + 3 * 4 * 400
    (rec,) = ex.read_records(out / "oracle_metrics_5dB.csv")
    assert rec.policy == "oracle" and rec.mean_aoi < 4
    assert main(["histogram", "--config", str(cfg), "--out", str(out), "--snr-db", "5,10",
                 "--policy", "fixed", "--slots", "2000"]) == 0
    lines = (out / "histogram_fixed.csv").read_text().splitlines()
    assert lines[0] == "snr_db,policy,frac_round_1,frac_round_2"
    assert lines[1] == "5.0,fixed,1.0,0.0"


def test_compare(tmp_path, capsys):
    recs = [ex.MetricsRecord(0.0, "a", 5.0, 0.1, [1.0, 0.0], 10), ex.MetricsRecord(0.0, "b", 6.0, 0.1, [1.0, 0.0], 10),
            ex.MetricsRecord(9.0, "a", 2.0, 0.1, [1.0, 0.0], 10), ex.MetricsRecord(9.0, "b", 1.0, 0.1, [1.0, 0.0], 10)]
    path = ex.write_records(tmp_path / "m.csv", recs, 2)
    assert main(["compare", str(path), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "# crossover a vs b between 0 and 9 dB" in text
    assert (tmp_path / "compare.csv").exists()


def test_preset_name_as_config(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["histogram", "--config", "desk", "--out", str(out), "--snr-db", "30",
                 "--policy", "fixed", "--slots", "1000"]) == 0
    resolved = ex.parse_config(out / "resolved_config.cfg")
    assert resolved.train.episodes == 200 and resolved.train.optimizer == "adam"
    assert (out / "histogram_fixed.csv").read_text().splitlines()[1] == "30.0,fixed,1.0,0.0"


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("env.m_levels = 1\n")
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError" and "m_levels" in err["message"]


def test_runtime_error_exit_code(tmp_path, quick_cfg, capsys):
    assert main(["evaluate", "--config", str(quick_cfg), "--out", str(tmp_path), "--net",
                 str(tmp_path / "missing.txt")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "noma_aoi.cli", "compare", str(tmp_path / "none.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.count("\n") == 1
