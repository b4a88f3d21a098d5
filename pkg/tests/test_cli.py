"""CLI: subcommands, config files, exit codes, decode output formats."""

import json

import pytest
from click.testing import CliRunner

from expertfuse.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def write_config(path, extra=()):
    lines = [
        "model.mode=fused",
        "model.expert_kinds=depth",
        "model.image_size=32",
        "train.peak_lr=0.002",
        "train.warmup_steps=0",
        "train.total_steps=2",
        "train.batch_size=2",
        "data.n=4",
        "data.difficulty=1",
        "data.image_size=32",
        "experts.kinds=depth",
    ]
    lines.extend(extra)
    path.write_text("\n".join(lines) + "\n")
    return path


def test_gen_data_and_train_and_eval(tmp_path, runner):
    config = write_config(tmp_path / "run.cfg")
    data_dir = tmp_path / "data"
    result = runner.invoke(main, ["--config", str(config), "--out",
                                  str(data_dir), "gen-data"])
    assert result.exit_code == 0, result.output
    assert (data_dir / "manifest.txt").exists()

    run_dir = tmp_path / "run"
    result = runner.invoke(main, ["--config", str(config), "--out",
                                  str(run_dir), "train", "--data",
                                  str(data_dir)])
    assert result.exit_code == 0, result.output
    assert (run_dir / "trace.csv").exists()
    assert (run_dir / "checkpoint" / "manifest.txt").exists()

    result = runner.invoke(main, ["--config", str(config), "eval",
                                  "--checkpoint", str(run_dir / "checkpoint"),
                                  "--data", str(data_dir),
                                  "--metric", "qa-accuracy"])
    assert result.exit_code == 0, result.output
    assert result.output.startswith("qa-accuracy=")


def test_decode_open_and_closed_ended(tmp_path, runner):
    config = write_config(tmp_path / "run.cfg")
    data_dir, run_dir = tmp_path / "data", tmp_path / "run"
    runner.invoke(main, ["--config", str(config), "--out", str(data_dir),
                         "gen-data"])
    runner.invoke(main, ["--config", str(config), "--out", str(run_dir),
                         "train", "--data", str(data_dir)])

    result = runner.invoke(main, ["decode", "--checkpoint",
                                  str(run_dir / "checkpoint"), "--data",
                                  str(data_dir), "--beam", "2",
                                  "--max-len", "6"])
    assert result.exit_code == 0, result.output

    result = runner.invoke(main, [
        "decode", "--checkpoint", str(run_dir / "checkpoint"),
        "--data", str(data_dir), "--question", "what color is the square",
        "--candidates", "red|green|blue|yellow"])
    assert result.exit_code == 0, result.output
    lines = [l for l in result.output.splitlines() if l.strip()]
    records = [json.loads(l) for l in lines]
    assert len(records) == 4
    assert sum(r["chosen"] for r in records) == 1
    assert {r["candidate"] for r in records} == {"red", "green", "blue",
                                                 "yellow"}


def test_validation_error_exits_2(tmp_path, runner):
    config = write_config(tmp_path / "bad.cfg", extra=["model.heads=3"])
    data_dir = tmp_path / "data"
    runner.invoke(main, ["--config", str(write_config(tmp_path / "ok.cfg")),
                         "--out", str(data_dir), "gen-data"])
    result = runner.invoke(main, ["--config", str(config), "--out",
                                  str(tmp_path / "r"), "train", "--data",
                                  str(data_dir)])
    assert result.exit_code == 2

    result = runner.invoke(main, ["--config", str(tmp_path / "missing.cfg"),
                                  "gen-data"])
    assert result.exit_code == 2


def test_cost_reports_counts(tmp_path, runner):
    config = write_config(tmp_path / "run.cfg")
    result = runner.invoke(main, ["--config", str(config), "cost",
                                  "--tokens", "10", "--examples", "5"])
    assert result.exit_code == 0, result.output
    assert "trainable_params=" in result.output
    assert "inference_flops=" in result.output


def test_ablate_runs_micro_plan(tmp_path, runner):
    result = runner.invoke(main, ["--out", str(tmp_path / "plan"), "ablate",
                                  "--plan", "mode-comparison", "--scenes", "8",
                                  "--steps", "1", "--n-seeds", "1",
                                  "--size", "32"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "plan" / "metrics.csv").exists()
    assert "fused" in result.output and "rgb-only" in result.output


def test_unknown_plan_kind_exits_2(tmp_path, runner):
    result = runner.invoke(main, ["--out", str(tmp_path), "ablate",
                                  "--plan", "bogus"])
    assert result.exit_code == 2
