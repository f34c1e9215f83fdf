"""
End-to-end tests for the pretrain -> gen -> train -> eval -> report pipeline.

The fast test drives a tiny task through the CLI. The desk-scale run is
marked slow and only collected with ``pytest -m slow``.
"""

import json
import logging
from pathlib import Path

import pytest

from drlkit.main import EXIT_OK, main
from drlkit.services.dataset_forge import load_dataset
from drlkit.services.evaluator import load_report
from drlkit.utils.logging_config import set_run_context

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"

TINY_CONFIG = """\
name = "tiny"

[data.task]
num_classes = 3
size = 6
n_train = 40
n_test = 30
smoothing = 3

[models]
target = "small-conv"
substitutes = ["mlp"]
hidden = [8]
channels = [2, 3]

[pretrain]
epochs = 2
objective = "ce-only"
lr = 0.05
batch_size = 16

[[forge.attacks]]
kind = "pgd"
[forge.attacks.config]
epsilon = 0.1
steps = 2

[[forge.attacks]]
kind = "fgsm"
[forge.attacks.config]
epsilon = 0.1

[train]
epochs = 2
objective = "drl-ar"
lr = 0.01
batch_size = 16
select_size = 30

[eval]
attacks = ["pgd", "fgsm"]
severities = [0, 2]
baseline_at = true
at_epochs = 1
threat_matrix = true

[eval.attack]
epsilon = 0.1
steps = 2
"""


@pytest.fixture(autouse=True)
def isolated(monkeypatch, tmp_path):
    """Empty working directory, no DRL_* overrides, root logger restored afterwards."""
    for key in ("DRL_SEED", "DRL_OUT", "DRL_TRAIN__EPOCHS", "DRL_NAME", "LOG_FORMAT"):
        monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
    set_run_context()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


def _run(command, config, out, seed=1):
    argv = [command, "--out", str(out), "--seed", str(seed), "--threads", "2"]
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv)


def test_full_pipeline(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert _run("pretrain", tiny_config, out) == EXIT_OK
    for name in ("target_init", "target_ce", "substitute0", "eval_substitute"):
        assert (out / "checkpoints" / f"{name}.ckpt").is_file()

    assert _run("gen", tiny_config, out) == EXIT_OK
    forged = load_dataset(out / "data" / "drl")
    assert len(forged) == 3 * 40
    assert forged.num_pairs == 2 * 40

    assert _run("train", tiny_config, out) == EXIT_OK
    assert load_dataset(out / "data" / "drl").content_hash() == forged.content_hash()
    assert (out / "checkpoints" / "target_drl.ckpt").is_file()
    assert "epoch" in (out / "logs" / "selection_trace.txt").read_text()

    assert _run("eval", tiny_config, out) == EXIT_OK
    reports = {p.stem: load_report(p) for p in (out / "reports").glob("*.json")}
    assert set(reports) == {"ce", "drl", "pgd_at"}
    assert reports["drl"].data_amount == 120
    assert reports["pgd_at"].data_amount == 40
    assert [r.setting for r in reports["drl"].threat_rows] == ["realistic", "M", "D'", "L", "M&D'", "M&L", "D'&L"]
    assert len((out / "reports" / "threats.txt").read_text().splitlines()) == 8

    capsys.readouterr()
    assert _run("report", None, out) == EXIT_OK
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].split()[0] == "defense"
    assert {line.split()[0] for line in printed[1:]} == {"ce", "drl", "pgd_at"}
    assert (out / "reports" / "summary.csv").is_file()

    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["seed"] == 1 and snapshot["name"] == "tiny"
    assert (out / "config.toml").read_text() == TINY_CONFIG


def test_pretrain_is_reproducible(tiny_config, tmp_path):
    for run in ("a", "b"):
        assert _run("pretrain", tiny_config, tmp_path / run, seed=7) == EXIT_OK
    for name in ("target_ce", "substitute0", "eval_substitute"):
        a = (tmp_path / "a" / "checkpoints" / f"{name}.ckpt").read_bytes()
        b = (tmp_path / "b" / "checkpoints" / f"{name}.ckpt").read_bytes()
        assert a == b, name


def test_gen_is_reproducible(tiny_config, tmp_path):
    for run in ("a", "b"):
        assert _run("pretrain", tiny_config, tmp_path / run, seed=5) == EXIT_OK
        assert _run("gen", tiny_config, tmp_path / run, seed=5) == EXIT_OK
    a = load_dataset(tmp_path / "a" / "data" / "drl")
    b = load_dataset(tmp_path / "b" / "data" / "drl")
    assert a.content_hash() == b.content_hash()
    assert (tmp_path / "a" / "data" / "drl" / "images.bin").read_bytes() == \
        (tmp_path / "b" / "data" / "drl" / "images.bin").read_bytes()

    manifest = json.loads((tmp_path / "a" / "data" / "drl" / "manifest.json").read_text())
    assert manifest["epsilon"] == 0.1 == a.epsilon
    assert {spec["config"]["epsilon"] for spec in manifest["provenance"]["attacks"]} == {0.1}


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_desk_scale_robustness(seed, tmp_path, monkeypatch):
    """DRL beats the CE target by 20 points under transfer PGD at a small clean cost,
    and its class-wise spread stays within 2 points of PGD-AT."""
    monkeypatch.setenv("DRL_EVAL__THREAT_MATRIX", "true")
    out = tmp_path / f"desk{seed}"
    for command in ("pretrain", "gen", "train", "eval"):
        assert _run(command, DESK_CONFIG, out, seed=seed) == EXIT_OK, command

    ce = load_report(out / "reports" / "ce.json")
    drl = load_report(out / "reports" / "drl.json")
    assert drl.robust_accuracy["pgd"] >= ce.robust_accuracy["pgd"] + 20.0
    assert ce.clean_accuracy - drl.clean_accuracy <= 5.0

    at = load_report(out / "reports" / "pgd_at.json")
    assert drl.classwise_std <= at.classwise_std + 2.0

    rows = {row.setting: row.robust_accuracy for row in drl.threat_rows}
    assert rows["D'&L"] <= rows["realistic"]
