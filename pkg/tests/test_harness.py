import csv
import dataclasses
import json

import numpy as np
import pytest

from lnnplan import harness as hn
from lnnplan import models as md
from lnnplan import training as tr
from lnnplan.cli import cli_main

SMALL = """
[system]
kind = "Pendulum"

[data]
n_trajectories = 4
steps_per_traj = 25
dt = 0.02
seed = 1

[model]
kinds = ["BNN", "LNN_FD"]
hidden = [8]

[train]
epochs = 2
batch_size = 32

[plan]
horizon = 5
n_samples = 8

[experiment]
kind = "prediction_error"
seeds = [0]
dataset_sizes = [50, 100]
rollout_length = 10
n_test_trajectories = 2
n_steps = 4
warmup = 2
measured = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.toml"
    text = SMALL + f'output_dir = "{tmp_path / "out"}"\ncheckpoint_dir = "{tmp_path / "ckpt"}"\n'
    p.write_text(text)
    return p


@pytest.fixture
def cfg(cfg_file):
    return hn.load_config(cfg_file)


# --- configuration -------------------------------------------------------------

def test_config_fields(cfg):
    assert cfg.system.kind == "Pendulum" and cfg.system.n == 1
    assert cfg.model_kinds == ["BNN", "LNN_FD"] and cfg.train.hidden == (8,)
    assert cfg.plan.dt == cfg.data.dt and cfg.plan.u_limit == cfg.system.u_max
    assert cfg.rollout_length == 10 and cfg.dataset_sizes == [50, 100]


def test_config_hash(cfg, cfg_file):
    assert cfg.config_hash() == hn.load_config(cfg_file).config_hash()
    assert len(cfg.config_hash()) == 64
    other = hn.config_from_mapping({"experiment": {"seeds": [0, 1]}})
    assert other.config_hash() != hn.config_from_mapping({"experiment": {"seeds": [0]}}).config_hash()


@pytest.mark.parametrize("raw", [
    {"experiment": {"seeds": []}},
    {"experiment": {"rollout_length": 0}},
    {"experiment": {"kind": "fig6"}},
    {"model": {"kinds": []}},
    {"model": {"kinds": ["MLP"]}},
    {"model": {"width": 3}},
    {"system": {"kind": "Hexapod"}},
    {"plan": {"gamma": 1.5}},
    {"train": {"epochs": -1}},
    {"experiment": {"colour": "red"}},
    {"extras": {}},
])
def test_config_errors(raw):
    with pytest.raises(hn.ConfigError):
        hn.config_from_mapping(raw)


def test_missing_and_malformed_config(tmp_path):
    with pytest.raises(hn.ConfigError, match="nope.toml"):
        hn.load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[system\nkind=")
    with pytest.raises(hn.ConfigError):
        hn.load_config(bad)


# --- report plumbing ---------------------------------------------------------------

def test_candle_stats():
    s = hn.candle_stats([0.004] * 10)
    assert len({s[k] for k in s if k.startswith("time_")}) == 1
    assert len({s[k] for k in s if k.startswith("freq_")}) == 1
    s = hn.candle_stats([0.001, 0.002, 0.003, 0.004, 0.005])
    assert s["time_median_s"] == 0.003
    np.testing.assert_allclose(s["freq_median_hz"], 333.333333, rtol=1e-6)
    assert s["freq_max_hz"] == 1000.0 and s["freq_min_hz"] == 200.0


def test_csv_is_strict(tmp_path):
    rows = [{"model": "BNN", "seed": 0, "x": 1e-17, "y": float("nan")}, {"model": "LNN_FD", "seed": 1, "x": 2.5}]
    parsed = list(csv.DictReader(hn.to_csv(rows).splitlines()))
    assert list(parsed[0]) == ["model", "seed", "x", "y"]
    assert float(parsed[0]["x"]) == 1e-17 and np.isnan(float(parsed[0]["y"])) and parsed[1]["y"] == ""


# --- experiments ----------------------------------------------------------------

def test_sample_efficiency_cells(cfg):

    one = dataclasses.replace(cfg, model_kinds=["LNN_FD"], dataset_sizes=[100])
    rep = hn.run_sample_efficiency(one)
    assert len(rep.rows) == 1 and rep.rows[0]["dataset_size"] == 100
    assert {r["dataset_size"] for r in rep.tables["curves"]} == {100}
    assert len(rep.tables["curves"]) == cfg.train.epochs
    rep = hn.run_sample_efficiency(dataclasses.replace(cfg, seeds=[0, 1]))
    cells = {(r["model"], r["seed"], r["dataset_size"]) for r in rep.rows}
    assert len(cells) == len(rep.rows) == 2 * 2 * 2
    first = [r for r in rep.tables["curves"] if r["model"] == "BNN" and r["seed"] == 0 and r["dataset_size"] == 50]
    assert first[0]["val_loss_normalized"] == 1.0
    assert rep.metadata["config_hash"] == dataclasses.replace(cfg, seeds=[0, 1]).config_hash()


def test_sample_efficiency_records_failures(cfg, monkeypatch):
    real = tr.train_model

    def flaky(ds, config, spec=None, model=None):
        if config.model_kind == "BNN":
            raise tr.TrainingDivergence("boom")
        return real(ds, config, spec, model)

    monkeypatch.setattr(tr, "train_model", flaky)
    rep = hn.run_sample_efficiency(cfg)
    status = {(r["model"], r["dataset_size"]): r["status"] for r in rep.rows}
    assert status == {("BNN", 50): "failed", ("BNN", 100): "failed", ("LNN_FD", 50): "ok", ("LNN_FD", 100): "ok"}


def test_prediction_error_requires_checkpoints(cfg, monkeypatch):
    def no_compute(*a, **k):
        raise AssertionError("work started before the checkpoint check")

    monkeypatch.setattr(tr, "generate_dataset", no_compute)
    with pytest.raises(hn.ConfigError, match="BNN_seed0"):
        hn.run_prediction_error(cfg)


def test_prediction_error_ground_truth_model(cfg):

    rep = hn.run_prediction_error(dataclasses.replace(cfg, model_kinds=["ANALYTIC"]), models={})
    assert rep.rows[0]["cumulative_rmse"] <= 1e-8
    assert all(r["rmse"] <= 1e-8 for r in rep.tables["per_step"])


def test_one_step_error_equals_validation_metric(cfg):
    test = tr.generate_dataset(cfg.system, 3, 10, cfg.data.dt, seed=5)
    model = md.init_model("LNN_FD", cfg.system, (8,), seed=1)
    sq = hn.open_loop_errors(model, test, 1, cfg.system)
    starts = test.take(np.arange(3) * 10)
    assert sq[0] == tr.next_state_mse(model, starts)


def test_experiments_reproducible_and_complete(cfg, tmp_path):
    trained, _ = hn.train_models(cfg)
    assert set(trained) == {("BNN", 0), ("LNN_FD", 0)}
    a = hn.run_prediction_error(cfg)
    b = hn.run_prediction_error(cfg)
    assert a.metric_rows() == b.metric_rows() and a.tables == b.tables
    inf = hn.run_inference_frequency(cfg)
    assert [r["n_replans"] for r in inf.rows] == [3, 3]
    assert inf.metadata["threads"] == 1 and inf.metadata["float_width"] == 64
    p1, p2 = hn.run_planner_eval(cfg), hn.run_planner_eval(cfg)
    assert p1.metric_rows() == p2.metric_rows()
    assert [r["model"] for r in p1.rows] == ["ANALYTIC", "BNN", "LNN_FD"]
    files = a.write(tmp_path / "rep")
    summary = json.loads((tmp_path / "rep" / "prediction_error.json").read_text())
    assert summary["metadata"]["config_hash"] == cfg.config_hash()
    assert {p.name for p in files} == {"prediction_error.csv", "prediction_error_per_step.csv", "prediction_error.json"}


def test_untrained_model_does_not_beat_reference():
    cfg = hn.config_from_mapping({
        "system": {"kind": "Pendulum"},
        "model": {"kinds": ["BNN"], "hidden": [16]},
        "experiment": {"kind": "planner_eval", "n_steps": 300},
    })
    models = {("BNN", 0): md.init_model("BNN", cfg.system, (16,), seed=0)}
    rep = hn.run_planner_eval(cfg, models)
    ref, bnn = rep.rows
    assert ref["success"] and ref["final_angle_error"] <= 0.2
    assert bnn["return"] <= ref["return"]


# --- CLI --------------------------------------------------------------------------

def test_cli_pipeline(cfg_file, cfg, tmp_path, capsys):
    data = tmp_path / "d.lds"
    assert cli_main(["gen-data", "--config", str(cfg_file), "--out", str(data)]) == 0
    assert tr.load_dataset(data).count == cfg.data.n_trajectories * cfg.data.steps_per_traj
    assert cli_main(["train", "--config", str(cfg_file), "--data", str(data)]) == 0
    assert cli_main(["eval-rollout", "--config", str(cfg_file)]) == 0
    rows = list(csv.DictReader((tmp_path / "out" / "prediction_error.csv").read_text().splitlines()))
    assert [r["model"] for r in rows] == ["BNN", "LNN_FD"]
    assert all(np.isfinite(float(r["cumulative_rmse"])) for r in rows)
    # the same report from the library with the checkpoints the CLI wrote
    lib = hn.run_prediction_error(cfg)
    assert [float(r["cumulative_rmse"]) for r in rows] == [r["cumulative_rmse"] for r in lib.rows]
    assert cli_main(["bench", "prediction_error", "--config", str(cfg_file)]) == 0
    assert cli_main(["plan", "--config", str(cfg_file), "--out", str(tmp_path / "plan")]) == 0
    assert (tmp_path / "plan" / "planner_eval.csv").is_file()


def test_cli_errors(cfg_file, tmp_path, capsys, monkeypatch):
    assert cli_main(["plan", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "missing.toml" in capsys.readouterr().err
    assert cli_main(["frobnicate", "--config", str(cfg_file)]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli_main(["bench", "fig9", "--config", str(cfg_file)]) == 2
    assert cli_main(["eval-rollout", "--config", str(cfg_file)]) == 2  # no checkpoints yet
    assert "missing checkpoints" in capsys.readouterr().err

    def diverge(*a, **k):
        raise tr.TrainingDivergence("non-finite loss")

    monkeypatch.setattr(tr, "train_model", diverge)
    assert cli_main(["train", "--config", str(cfg_file)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_cli_seed_override(cfg_file, tmp_path):
    assert cli_main(["train", "--config", str(cfg_file), "--seed", "7"]) == 0
    assert (tmp_path / "ckpt" / "LNN_FD_seed7.lnn").is_file()
    assert not (tmp_path / "ckpt" / "LNN_FD_seed0.lnn").exists()
