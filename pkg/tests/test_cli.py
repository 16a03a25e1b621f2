import json
import subprocess
import sys

import numpy as np
import pytest

from abat import experiment
from abat.cli import main
from abat.datagen import load_corpus
from abat.experiment import ExperimentConfig
from abat.models import load_checkpoint

SMALL = {
    "data": {"generate": {"trials_per_domain": 24, "seed": 0}},
    "train": {"epochs": 2},
    "grid": [{"method": "bt", "align": False}, {"method": "bt", "align": True}, {"method": "abat", "inner": "pgd", "eps": [0.03]}],
    "eval": {"eps": [0.03], "queries": 5},
    "sweep": {"values": [0.5, 1.0], "rows": ["bt_ea"], "eps": [0.03]},
    "seeds": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({**SMALL, "output": str(tmp_path / "run")}))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def finished(config, capsys):
    code, out, _ = run_cli(capsys, "run", "--config", config)
    assert code == 0 and out["ok"]
    return config.parent / "run"


def test_run_writes_reports_figures_and_checkpoints(finished):
    for name in ("report.csv", "report.md", "report.png", "online.csv", "online.png", "config.json"):
        assert (finished / name).is_file(), name
    for seed in (0, 1):
        ck = finished / f"seed_{seed}" / "checkpoints"
        assert sorted(p.name for p in ck.glob("*.abm")) == ["abat_pgd_0.03.abm", "bt.abm", "bt_ea.abm"]
        assert (finished / f"seed_{seed}" / "report.csv").is_file()
    assert not list(finished.parent.glob(".*staging*"))


def test_config_hash_is_embedded_everywhere(finished, config):
    h = ExperimentConfig.load(config).hash
    assert json.loads((finished / "config.json").read_text())["config_hash"] == h
    assert all(line.startswith(h) for line in (finished / "report.csv").read_text().splitlines()[1:])
    assert f"config_hash={h}" in (finished / "report.md").read_text()
    _, meta = load_checkpoint(finished / "seed_0" / "checkpoints" / "bt.abm")
    assert meta["config_hash"] == h and meta["seed"] == 0
    header = json.loads((finished / "seed_0" / "checkpoints" / "bt.log.jsonl").read_text().splitlines()[0])
    assert header["config"]["config_hash"] == h


def test_report_recomputes_the_mean(finished, config, capsys):
    before = (finished / "report.csv").read_bytes()
    (finished / "report.csv").unlink()
    code, _, _ = run_cli(capsys, "report", "--config", config)
    assert code == 0
    assert (finished / "report.csv").read_bytes() == before


def test_train_eval_attack_subcommands(finished, config, capsys, tmp_path):
    code, out, _ = run_cli(capsys, "train", "--config", config, "--seed", 1, "--method", "abat", "--eps", 0, "--out", tmp_path / "ck")
    assert code == 0
    a, _ = load_checkpoint(out["checkpoint"])
    b, _ = load_checkpoint(finished / "seed_1" / "checkpoints" / "bt_ea.abm")
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])

    code, out, _ = run_cli(capsys, "eval", "--config", config, "--seed", 0, "--out", tmp_path / "ev")
    assert code == 0
    assert (tmp_path / "ev" / "report.csv").read_bytes() == (finished / "seed_0" / "report.csv").read_bytes()

    ck = finished / "seed_0" / "checkpoints" / "bt.abm"
    code, out, _ = run_cli(capsys, "attack", "--config", config, "--seed", 0, "--checkpoint", ck, "--kind", "fgsm", "--eps", 0.05, "--out", tmp_path / "adv")
    assert code == 0
    summary = json.loads((tmp_path / "adv" / "summary.json").read_text())
    assert summary["runs"][0]["attack"]["kind"] == "fgsm"
    domains, manifest = load_corpus(tmp_path / "adv" / "bt")
    assert manifest["attack"]["epsilon_rel"] == 0.05 and len(domains[0]) == 48


def test_sweep_and_gen_data(config, capsys, tmp_path):
    code, out, _ = run_cli(capsys, "sweep", "--config", config, "--seed", 0, "--out", tmp_path / "sw")
    assert code == 0
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "config_hash,seeds,method,epsilon,train_fraction,bca"
    assert len(lines) == 1 + 2 * 2
    assert (tmp_path / "sw" / "sweep.png").is_file()

    proc = subprocess.run(
        [sys.executable, "-m", "abat.cli", "gen-data", "--config", str(config), "--out", str(tmp_path / "corpus")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"]
    domains, manifest = load_corpus(tmp_path / "corpus")
    assert [d.domain for d in domains] == ["0", "1", "2"] and manifest["config_hash"]


def test_failures_report_json_and_leave_nothing(config, capsys, monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise RuntimeError("evaluation exploded")

    monkeypatch.setattr(experiment, "evaluate_cell", boom)
    out_dir = tmp_path / "broken"
    code, out, err = run_cli(capsys, "run", "--config", config, "--out", out_dir)
    assert code == 1 and out is None
    assert err["error"] == "RuntimeError" and err["command"] == "run" and "exploded" in err["message"]
    assert not out_dir.exists()
    assert not list(tmp_path.glob(".*staging*"))

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": []}))
    code, _, err = run_cli(capsys, "run", "--config", bad)
    assert code == 1 and err["error"] == "ConfigError"
    bad.write_text("{not json")
    code, _, err = run_cli(capsys, "eval", "--config", bad)
    assert code == 1 and "invalid JSON" in err["message"]


def test_report_rejects_foreign_runs(finished, config, capsys, tmp_path):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "train": {"epochs": 3}, "output": str(finished)}))
    code, _, err = run_cli(capsys, "report", "--config", other)
    assert code == 1 and "not" in err["message"]


@pytest.mark.slow
def test_full_pipeline_cpu_budget(default_run):
    assert default_run["cpu"] < 30 * 60
