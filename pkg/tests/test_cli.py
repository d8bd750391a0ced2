import csv
import io
import json
import shutil
import subprocess
import sys

import pytest

from loracompose import cli
from loracompose.hub import load_index, rebuild_index, write_index


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A trained default workspace shared by the read-only tests."""
    root = tmp_path_factory.mktemp("ws")
    assert run("suite", "--suite", root / "suite.json") == 0
    assert run("train", "--suite", root / "suite.json", "--registry", root / "registry") == 0
    return root


def ws_args(root):
    return ("--suite", root / "suite.json", "--registry", root / "registry")


def test_suite_lists_sixty_specs(tmp_path):
    path = tmp_path / "suite.json"
    assert run("suite", "--seed", 7, "--upstream", 40, "--unseen", 20, "--suite", path) == 0
    doc = json.loads(path.read_text())
    assert len(doc["upstream"]) + len(doc["unseen"]) == 60
    first = path.read_bytes()
    assert run("suite", "--seed", 7, "--upstream", 40, "--unseen", 20, "--suite", path) == 0
    assert path.read_bytes() == first


def test_suite_rejects_zero_upstream(tmp_path, capsys):
    assert run("suite", "--upstream", 0, "--suite", tmp_path / "s.json") == 2
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "s.json").exists()


def test_home_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LORAHUB_HOME", str(tmp_path / "home"))
    assert run("suite", "--upstream", 4, "--unseen", 2) == 0
    assert (tmp_path / "home" / "suite.json").exists()


def test_train_fills_registry(workspace):
    index = load_index(workspace / "registry")
    assert len(index) == 40
    assert (workspace / "registry" / "base.npz").exists()
    assert all(e.rank == 16 for e in index.entries)


def test_train_missing_suite(tmp_path):
    assert run("train", "--suite", tmp_path / "none.json", "--registry", tmp_path / "reg") == 2


def test_interrupted_train_resumes(workspace, tmp_path, capsys):
    reg = tmp_path / "registry"
    shutil.copytree(workspace / "registry", reg)
    # simulate an interruption after 25 modules
    for entry in load_index(reg).entries[25:]:
        (reg / entry.path).unlink()
    write_index(reg, rebuild_index(reg))
    assert len(load_index(reg)) == 25
    capsys.readouterr()
    assert run("train", "--suite", workspace / "suite.json", "--registry", reg) == 0
    assert capsys.readouterr().out.count("skipped") == 25
    assert (reg / "registry.json").read_bytes() == (workspace / "registry" / "registry.json").read_bytes()


def test_train_refuses_corrupt_module(workspace, tmp_path):
    reg = tmp_path / "registry"
    shutil.copytree(workspace / "registry", reg)
    victim = reg / load_index(reg).entries[0].path
    victim.write_bytes(victim.read_bytes()[:-8])
    assert run("train", "--suite", workspace / "suite.json", "--registry", reg) == 3


def test_adapt_with_budget_one_matches_zero_shot(workspace, tmp_path):
    out = tmp_path / "res"
    assert run("adapt", *ws_args(workspace), "--budget", 1, "--seeds", 2, "--out", out) == 0
    doc = json.loads((out / "results.json").read_text())
    assert len(doc["tasks"]) == 20 and len(doc["runs"]) == 40
    for t in doc["tasks"]:
        assert t["lorahub_avg"] == t["lorahub_best"] == t["zero_shot"]
    rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
    assert list(rows[0]) == ["task", "seed", "method", "loss", "accuracy"]
    assert len(rows) == 80


def test_adapt_manifest_echoes_defaults(workspace, tmp_path):
    out = tmp_path / "res"
    assert run("adapt", *ws_args(workspace), "--tasks", "new000_mixture", "--budget", 3, "--out", out) == 0
    m = json.loads((out / "manifest.json").read_text())
    d = m["defaults"]
    assert (d["shots"], d["budget"], d["alpha"], d["bound"], d["candidates"], d["rank"]) == (5, 40, 0.05, 1.5, 20, 16)
    assert d["initial_mean"] == "zeros"
    assert m["config"]["budget"] == 3 and m["config"]["seeds"] == [0, 1, 2, 3, 4]
    assert "adapt_seconds" in m["timings"]


def test_adapt_empty_registry(workspace, tmp_path, capsys):
    assert run("adapt", "--suite", workspace / "suite.json", "--registry", tmp_path / "empty",
               "--out", tmp_path / "res") == 3
    assert "empty" in capsys.readouterr().err


def test_adapt_unknown_task(workspace, tmp_path):
    assert run("adapt", *ws_args(workspace), "--tasks", "up000_teacher", "--out", tmp_path / "r") == 2


def test_adapt_rejects_negative_alpha(workspace, tmp_path):
    assert run("adapt", *ws_args(workspace), "--alpha", -1, "--out", tmp_path / "r") == 2


@pytest.fixture(scope="module")
def analyzed(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("res")
    tasks = ["new000_mixture", "new001_mixture", "new002_mixture"]
    assert run("adapt", *ws_args(workspace), "--tasks", *tasks, "--seeds", 2, "--out", out) == 0
    assert run("analyze", "--results", out) == 0
    return out


def test_report_columns(analyzed):
    report = (analyzed / "report.md").read_text()
    assert "| Task | Zero | LoraHub_avg | LoraHub_best |" in report
    assert "| **Average** |" in report


def test_usefulness_csv_rows_and_ranks(analyzed):
    rows = list(csv.DictReader(io.StringIO((analyzed / "usefulness.csv").read_text())))
    assert len(rows) == 20
    assert sorted(int(r["rank"]) for r in rows) == list(range(1, 21))
    means = [float(r["mean_abs_weight"]) for r in rows]
    assert means == sorted(means, reverse=True)


def test_analyze_missing_results(tmp_path):
    assert run("analyze", "--results", tmp_path) == 2


def test_show_defaults(capsys):
    assert run("--show-defaults") == 0
    lines = {ln.split()[0]: ln.split()[1] for ln in capsys.readouterr().out.splitlines()}
    assert lines["shots"] == "5" and lines["budget"] == "40" and lines["alpha"] == "0.05"
    assert lines["bound"] == "1.5" and lines["candidates"] == "20" and lines["rank"] == "16"
    assert lines["initial_mean"] == "zeros"


def test_no_command_is_usage_error():
    assert run() == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "loracompose", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "loracompose" in proc.stdout
