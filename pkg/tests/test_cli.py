import csv
import json
import subprocess
import sys

import pytest

from nodeinject import cli
from nodeinject.harness import ExperimentConfig


def tiny_config(path, out):
    cfg = ExperimentConfig()
    cfg.dataset.n_nodes, cfg.dataset.n_classes, cfg.dataset.n_features = 60, 3, 12
    cfg.dataset.p_in, cfg.dataset.p_out, cfg.dataset.p_topic = 0.2, 0.02, 0.4
    cfg.victim.epochs = 40
    cfg.attack.train.max_epochs, cfg.attack.train.hidden = 1, 8
    cfg.evaluation.max_targets = 8
    cfg.out_dir = str(out)
    cfg.dump(path)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root / "cfg.json", root / "out")
    assert cli.main(["train-victim", "--config", str(cfg)]) == 0
    assert cli.main(["attack", "--config", str(cfg)]) == 0
    return root, cfg


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs(run_dir):
    root, _ = run_dir
    out = root / "out"
    for name in ("victim.ckpt", "victim_metrics.json", "config.json", "attacker.ckpt", "train_log.csv",
                 "train_state.ckpt"):
        assert (out / name).is_file(), name
    metrics = json.loads((out / "victim_metrics.json").read_text())
    assert 0 <= metrics["test_misclassification"] <= 1
    log = read_csv(out / "train_log.csv")
    assert [r["epoch"] for r in log] == ["0", "1"]
    assert not list(out.glob(".staging-*"))


def test_resume_continues(run_dir, tmp_path):
    root, cfg = run_dir
    doc = json.loads(cfg.read_text())
    doc["attack"]["train"]["max_epochs"] = 2
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps(doc))
    assert cli.main(["attack", "--config", str(cfg2), "--resume"]) == 0
    assert [r["epoch"] for r in read_csv(root / "out" / "train_log.csv")] == ["0", "1", "2"]


@pytest.mark.parametrize("extra", [[], ["--sample"]])
def test_evaluate(run_dir, extra):
    root, cfg = run_dir
    assert cli.main(["evaluate", "--config", str(cfg)] + extra) == 0
    rows = read_csv(root / "out" / "report_G2A2C.csv")
    assert len(rows) == 8
    assert "| G2A2C |" in (root / "out" / "summary.md").read_text()
    assert b"\r\n" in (root / "out" / "report_G2A2C.csv").read_bytes()


def test_baselines(run_dir):
    root, cfg = run_dir
    assert cli.main(["baselines", "--config", str(cfg), "--threads", "2"]) == 0
    for m in ("RandomInject", "GreedyProbe"):
        assert len(read_csv(root / "out" / f"report_{m}.csv")) == 8
    assert "GreedyProbe" in (root / "out" / "baselines.md").read_text()


def test_sweep(run_dir):
    root, cfg = run_dir
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "beta_n", "--values", "1,2"]) == 0
    rows = read_csv(root / "out" / "sweep.csv")
    assert [r["value"] for r in rows] == ["1.0", "2.0"]
    assert "non-decreasing in beta_n:" in (root / "out" / "sweep.md").read_text()
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "beta_n", "--values", "1,x"]) == 2
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "beta_f", "--values", "0,0.5", "--tune-epochs", "1"]) == 0
    assert [r["value"] for r in read_csv(root / "out" / "sweep.csv")] == ["0.0", "0.5"]


def test_export_embeddings(run_dir):
    root, cfg = run_dir
    assert cli.main(["export-embeddings", "--config", str(cfg), "--targets", "0,1"]) == 2
    assert cli.main(["export-embeddings", "--config", str(cfg), "--targets", "0,1", "--diagnostics"]) == 0
    rows = read_csv(root / "out" / "embeddings.csv")
    assert {r["target_id"] for r in rows} == {"0", "1"}
    assert {r["section"] for r in rows} == {"pre", "post"}
    assert cli.main(["export-embeddings", "--config", str(cfg), "--targets", "999", "--diagnostics"]) == 2


def test_serve_oracle(run_dir, capsys):
    _, cfg = run_dir
    assert cli.main(["serve-oracle", "--config", str(cfg), "--max-seconds", "0.3"]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["host"] == "127.0.0.1" and info["port"] > 0


def test_exit_codes(tmp_path):
    assert cli.main(["train-victim", "--config", str(tmp_path / "nope.json")]) == 3
    (tmp_path / "bad.json").write_text(json.dumps({"victim": {"colour": 1}}))
    assert cli.main(["train-victim", "--config", str(tmp_path / "bad.json")]) == 2
    cfg = tiny_config(tmp_path / "c.json", tmp_path / "fresh")
    assert cli.main(["evaluate", "--config", str(cfg)]) == 3
    assert not (tmp_path / "fresh").exists()
    assert cli.main(["attack", "--config", str(cfg), "--resume"]) == 3
    doc = json.loads(cfg.read_text())
    doc["dataset"] = {"kind": "citation", "path": str(tmp_path / "no_such_dir")}
    (tmp_path / "cora.json").write_text(json.dumps(doc))
    assert cli.main(["train-victim", "--config", str(tmp_path / "cora.json")]) == 3


def test_seed_and_out_overrides(tmp_path):
    cfg = tiny_config(tmp_path / "c.json", tmp_path / "a")
    assert cli.main(["train-victim", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    saved = json.loads((tmp_path / "b" / "config.json").read_text())
    assert saved["victim"]["seed"] == 5 and saved["evaluation"]["seeds"] == [5]
    assert not (tmp_path / "a").exists()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "nodeinject.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-victim" in res.stdout
