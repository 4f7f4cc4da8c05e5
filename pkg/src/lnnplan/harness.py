"""Experiment configuration, the four benchmark experiments, and report export."""

from __future__ import annotations

import csv
import dataclasses
import datetime
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import models as md
from . import planner as pl
from . import training as tr
from .mechanics import State, SystemSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

EXPERIMENTS = ("sample_efficiency", "prediction_error", "inference_frequency", "planner_eval")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class DataConfig:
    n_trajectories: int = 100
    steps_per_traj: int = 100
    dt: float = 0.02
    seed: int = 0


@dataclass
class ExperimentConfig:
    kind: str = "sample_efficiency"
    system: SystemSpec = field(default_factory=lambda: SystemSpec("DoublePendulum"))
    model_kinds: list[str] = field(default_factory=lambda: ["BNN", "LNN_FD"])
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset_sizes: list[int] = field(default_factory=lambda: [10000])
    rollout_length: int = 50
    n_test_trajectories: int = 20
    n_steps: int = 300
    warmup: int = 20
    measured: int = 200
    initial_q: list[float] | None = None
    initial_qd: list[float] | None = None
    output_dir: str = "out"
    checkpoint_dir: str = "checkpoints"
    data: DataConfig = field(default_factory=DataConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    plan: pl.PlanConfig = field(default_factory=pl.PlanConfig)
    reward: pl.RewardFn = field(default_factory=pl.RewardFn)

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise ConfigError(f"experiment kind must be one of {EXPERIMENTS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.model_kinds:
            raise ConfigError("at least one model kind is required")
        bad = [k for k in self.model_kinds if k not in md.MODEL_KINDS + ("ANALYTIC",)]
        if bad:
            raise ConfigError(f"unknown model kinds {bad}")
        if self.rollout_length < 1:
            raise ConfigError("rollout_length must be >= 1")
        if any(s < 1 for s in self.dataset_sizes):
            raise ConfigError("dataset sizes must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["system"] = {"kind": self.system.kind, "params": self.system.params, "g": self.system.g,
                       "u_max": self.system.u_max, "reduced_index": list(self.system.reduced_index)}
        return json.loads(json.dumps(d, default=_jsonable))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def initial_state(self) -> State:
        n = self.system.n
        q = np.zeros(n) if self.initial_q is None else np.asarray(self.initial_q, float)
        qd = np.zeros(n) if self.initial_qd is None else np.asarray(self.initial_qd, float)
        if q.shape != (n,) or qd.shape != (n,):
            raise ConfigError(f"initial state must have {n} coordinates")
        return State(q, qd)

    def train_config(self, model_kind: str, seed: int) -> tr.TrainConfig:
        return dataclasses.replace(self.train, model_kind=model_kind, seed=seed, loss_kind=None)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _block(raw: dict, name: str) -> dict:
    b = raw.get(name, {})
    if not isinstance(b, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(b)


def config_from_mapping(raw: dict) -> ExperimentConfig:
    """Build a config from the parsed file. Unknown keys are errors."""
    known = {"system", "data", "model", "train", "plan", "reward", "experiment"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config blocks: {sorted(extra)}")
    try:
        sysb = _block(raw, "system")
        kind = sysb.pop("kind", "DoublePendulum")
        system = SystemSpec(kind, **sysb)
        data = DataConfig(**_block(raw, "data"))
        modelb = _block(raw, "model")
        kinds = modelb.pop("kinds", ["BNN", "LNN_FD"])
        trainb = _block(raw, "train")
        for key in ("hidden", "epsilon"):
            if key in modelb:
                trainb[key] = modelb.pop(key)
        if modelb:
            raise ConfigError(f"unknown keys in [model]: {sorted(modelb)}")
        train = tr.TrainConfig(**trainb)
        planb = _block(raw, "plan")
        planb.setdefault("dt", data.dt)
        planb.setdefault("u_limit", system.u_max)
        plan = pl.PlanConfig(**planb)
        reward = pl.RewardFn(**_block(raw, "reward"))
        exp = _block(raw, "experiment")
        return ExperimentConfig(system=system, model_kinds=list(kinds), data=data, train=train,
                                plan=plan, reward=reward, **exp)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{p}: {err}") from err
    return config_from_mapping(raw)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class BenchReport:
    experiment: str
    rows: list[dict]
    metadata: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    timing_columns: tuple[str, ...] = ()

    def metric_rows(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k not in self.timing_columns} for r in self.rows]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.experiment}.csv"]
        written[0].write_text(to_csv(self.rows))
        for name, table in self.tables.items():
            p = out / f"{self.experiment}_{name}.csv"
            p.write_text(to_csv(table))
            written.append(p)
        summary = {"experiment": self.experiment, "metadata": self.metadata, "results": self.rows}
        p = out / f"{self.experiment}.json"
        p.write_text(json.dumps(summary, indent=2, default=_jsonable))
        written.append(p)
        return written


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _metadata(config: ExperimentConfig, **extra) -> dict:
    return {
        "config_hash": config.config_hash(),
        "code_version": __version__,
        "float_width": 64,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "system": config.system.kind,
        **extra,
    }


# --------------------------------------------------------------------------
# Data and checkpoints
# --------------------------------------------------------------------------


def dataset_for_seed(config: ExperimentConfig, seed: int, n_trajectories: int | None = None):
    d = config.data
    n = d.n_trajectories if n_trajectories is None else n_trajectories
    return tr.generate_dataset(config.system, n, d.steps_per_traj, d.dt, seed=_mix(d.seed, seed))


def _mix(*xs) -> int:
    return int(np.random.SeedSequence(list(xs)).generate_state(1)[0])


def checkpoint_path(config: ExperimentConfig, kind: str, seed: int) -> Path:
    return Path(config.checkpoint_dir) / f"{kind}_seed{seed}.lnn"


def train_models(config: ExperimentConfig, dataset=None, write=True):
    """Train every (model kind, seed). LNN_DIAG shares LNN_FD's training (the two
    differ only in the inference path), so its weights are copied when both are listed."""
    trained, curves = {}, {}
    for seed in config.seeds:
        ds = dataset if dataset is not None else dataset_for_seed(config, seed)
        for kind in config.model_kinds:
            if kind == "ANALYTIC":
                continue
            if kind == "LNN_DIAG" and ("LNN_FD", seed) in trained:
                model = dataclasses.replace(trained["LNN_FD", seed], kind="LNN_DIAG")
                curve = curves["LNN_FD", seed]
            else:
                model, curve = tr.train_model(ds, config.train_config(kind, seed), config.system)
            trained[kind, seed], curves[kind, seed] = model, curve
            if write:
                p = checkpoint_path(config, kind, seed)
                p.parent.mkdir(parents=True, exist_ok=True)
                md.save_model(p, model)
                p.with_suffix(".curve.csv").write_text(curve.to_csv())
    return trained, curves


def load_models(config: ExperimentConfig) -> dict:
    """All checkpoints for (kind, seed); every missing path is reported up front."""
    want = [(k, s) for k in config.model_kinds if k != "ANALYTIC" for s in config.seeds]
    missing = [str(checkpoint_path(config, k, s)) for k, s in want
               if not checkpoint_path(config, k, s).is_file()]
    if missing:
        raise ConfigError("missing checkpoints: " + ", ".join(missing))
    return {(k, s): md.load_model(checkpoint_path(config, k, s)) for k, s in want}


def _model_for(config, models, kind, seed):
    if kind == "ANALYTIC":
        return md.AnalyticModel(config.system)
    return models[kind, seed]


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


def run_sample_efficiency(config: ExperimentConfig, keep_models: dict | None = None) -> BenchReport:
    """Train every (kind, size, seed) cell. Pass a dict as ``keep_models`` to
    receive the trained models keyed by (kind, seed, dataset size)."""
    rows, curve_rows = [], []
    spt = config.data.steps_per_traj
    heldout = dataset_for_seed(config, 10_007, max(2, config.n_test_trajectories))
    for seed in config.seeds:
        n_max = max(-(-s // spt) for s in config.dataset_sizes)
        full = dataset_for_seed(config, seed, n_max)
        for kind in config.model_kinds:
            for size in config.dataset_sizes:
                ds = full.first_trajectories(-(-size // spt))
                row = {"model": kind, "seed": seed, "dataset_size": ds.count}
                try:
                    model, curve = tr.train_model(ds, config.train_config(kind, seed), config.system)
                except tr.TrainingDivergence as err:
                    rows.append({**row, "status": "failed", "error": str(err)})
                    continue
                if keep_models is not None:
                    keep_models[kind, seed, ds.count] = model
                row.update(status="ok",
                           final_train_loss=curve.train_loss[-1] if len(curve) else float("nan"),
                           final_val_loss=curve.val_loss[-1] if len(curve) else float("nan"),
                           heldout_next_state_mse=tr.next_state_mse(model, heldout))
                rows.append(row)
                norm = curve.normalized()
                for i in range(len(curve)):
                    curve_rows.append({"model": kind, "seed": seed, "dataset_size": ds.count,
                                       "epoch": curve.epoch[i], "samples_seen": curve.samples_seen[i],
                                       "train_loss": curve.train_loss[i], "val_loss": curve.val_loss[i],
                                       "train_loss_normalized": norm.train_loss[i],
                                       "val_loss_normalized": norm.val_loss[i]})
    meta = _metadata(config, note="curves exported on a linear scale; normalized columns divide by the first epoch")
    return BenchReport("sample_efficiency", rows, meta, {"curves": curve_rows})


def open_loop_errors(model, trajectories: tr.TransitionDataset, k: int, spec: SystemSpec):
    """Feed the model its own predictions for k steps from each trajectory start.

    Returns per-step squared error (k,), averaged over trajectories and state
    dimensions, in the coordinates the model predicts.
    """
    spt = trajectories.steps_per_traj
    n_traj = trajectories.n_traj
    if k > spt:
        raise ConfigError(f"rollout length {k} exceeds test trajectory length {spt}")
    idx = np.arange(n_traj) * spt
    sq = np.empty(k)
    q, qd = md.project_state(model, trajectories.q[idx], trajectories.qd[idx])
    with np.errstate(all="ignore"):
        for step in range(k):
            rec = idx + step
            q, qd = md.predict_next(model, State(q, qd), trajectories.u[rec], trajectories.dt)
            tq, tqd = md.project_state(model, trajectories.q_next[rec], trajectories.qd_next[rec])
            err = np.concatenate([q - tq, qd - tqd], axis=-1)
            sq[step] = np.mean(err ** 2)
    return sq


def run_prediction_error(config: ExperimentConfig, models: dict | None = None) -> BenchReport:
    if models is None:
        models = load_models(config)
    k = config.rollout_length
    test = tr.generate_dataset(config.system, config.n_test_trajectories, k, config.data.dt,
                               seed=_mix(config.data.seed, 20_011))
    rows, step_rows = [], []
    for kind in config.model_kinds:
        for seed in config.seeds:
            model = _model_for(config, models, kind, seed)
            sq = open_loop_errors(model, test, k, config.system)
            rmse = np.sqrt(sq)
            rows.append({"model": kind, "seed": seed, "k": k,
                         "space": "reduced" if kind == "LNN_COM" else "full",
                         "one_step_rmse": float(rmse[0]), "final_step_rmse": float(rmse[-1]),
                         "cumulative_rmse": float(np.sqrt(np.mean(sq)))})
            for i, e in enumerate(rmse):
                step_rows.append({"model": kind, "seed": seed, "step": i + 1, "rmse": float(e)})
    meta = _metadata(config, note="LNN_COM errors are over the reduced-state projection only",
                     n_test_trajectories=config.n_test_trajectories)
    return BenchReport("prediction_error", rows, meta, {"per_step": step_rows})


def candle_stats(times) -> dict:
    """min/quartiles/max of replan wall time and the matching frequencies (Hz)."""
    t = np.asarray(times, float)
    qs = np.percentile(t, [0, 25, 50, 75, 100])
    names = ("min", "q1", "median", "q3", "max")
    out = {f"time_{n}_s": float(v) for n, v in zip(names, qs)}
    # the fastest replan gives the highest frequency
    for n, v in zip(names, qs[::-1]):
        out[f"freq_{n}_hz"] = float(1.0 / v)
    return out


def run_inference_frequency(config: ExperimentConfig, models: dict | None = None) -> BenchReport:
    if models is None:
        models = load_models(config)
    seed = config.seeds[0]
    rows = []
    n_steps = config.warmup + config.measured
    for kind in config.model_kinds:
        model = _model_for(config, models, kind, seed)
        _, results = pl.receding_horizon_run(config.system, model, None, config.reward,
                                             config.initial_state(), n_steps, config.plan)
        times = [r.wall_time for r in results[config.warmup:]]
        rows.append({"model": kind, "seed": seed, "n_replans": len(times), **candle_stats(times)})
    meta = _metadata(config, threads=1, cpu_count=os.cpu_count(), warmup=config.warmup,
                     timed_unit="full replan cycle (sampling, batched rollouts, weighting)")
    timing = tuple(k for k in rows[0] if k.startswith(("time_", "freq_"))) if rows else ()
    return BenchReport("inference_frequency", rows, meta, timing_columns=timing)


def run_planner_eval(config: ExperimentConfig, models: dict | None = None) -> BenchReport:
    kinds = list(config.model_kinds)
    if models is None:
        models = load_models(config) if any(k != "ANALYTIC" for k in kinds) else {}
    rows = []
    s0 = config.initial_state()

    def run(kind, seed):
        model = _model_for(config, models, kind, seed)
        try:
            traj, results = pl.receding_horizon_run(config.system, model, None, config.reward, s0,
                                                    config.n_steps, config.plan)
        except pl.PlanningFailure as err:
            return {"model": kind, "seed": seed, "status": "failed", "error": str(err)}
        err = config.reward.angle_error(traj.q[-1])
        return {"model": kind, "seed": seed, "status": "ok",
                "return": pl.closed_loop_return(traj, config.reward),
                "final_angle_error": float(np.max(err)),
                "success": bool(np.max(err) <= 0.2),
                "mean_replan_time_s": float(np.mean([r.wall_time for r in results]))}

    ref = run("ANALYTIC", config.seeds[0])
    rows.append(ref)
    for kind in kinds:
        if kind == "ANALYTIC":
            continue
        for seed in config.seeds:
            row = run(kind, seed)
            if row["status"] == "ok" and ref.get("status") == "ok":
                row["return_ratio"] = row["return"] / ref["return"]
            rows.append(row)
    return BenchReport("planner_eval", rows, _metadata(config), timing_columns=("mean_replan_time_s",))


RUNNERS = {
    "sample_efficiency": run_sample_efficiency,
    "prediction_error": run_prediction_error,
    "inference_frequency": run_inference_frequency,
    "planner_eval": run_planner_eval,
}
