"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in
the terminal summary. Trained models are shared through module fixtures."""

import dataclasses
import time

import numpy as np
import pytest

from lnnplan import diff_core as dc
from lnnplan import harness as hn
from lnnplan import mechanics as mc
from lnnplan import models as md
from lnnplan import planner as pl
from lnnplan import training as tr
from lnnplan.mechanics import State, SystemSpec
from conftest import record_criterion

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2]


def check(number, passed, detail):
    record_criterion(number, passed, detail)
    assert passed, detail


# --------------------------------------------------------------------------
# 1. derivative exactness
# --------------------------------------------------------------------------

def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_criterion_1_derivative_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_jac, worst_grad = 0.0, 0.0
    for case in range(100):
        n_in = int(rng.integers(1, 5))
        n_out = int(rng.integers(1, 4))
        hidden = list(rng.integers(2, 9, size=int(rng.integers(1, 3))))
        sizes = [n_in] + hidden + [n_out]
        act = ("tanh", "softplus")[case % 2]
        net = dc.mlp_init(sizes, seed=case, activation=act)
        net.params[:] += rng.normal(scale=0.3, size=net.params.size)
        x = rng.normal(size=n_in)

        _, J = dc.mlp_eval_jacobian(net, x)
        h = 1e-5
        J_fd = np.stack([(dc.mlp_eval(net, x + h * e) - dc.mlp_eval(net, x - h * e)) / (2 * h)
                         for e in np.eye(n_in)], axis=-1)
        worst_jac = max(worst_jac, _rel(J, J_fd))

        # a loss that depends on Jacobian entries and outputs (second-order in the params)
        target = rng.normal(size=(n_out, n_in))

        def loss_of(p):
            y, Jp = dc.mlp_eval_jacobian(net, x, params=p)
            d = dc.sub(Jp, target)
            return dc.add(dc.sum(dc.mul(d, d)), dc.sum(dc.mul(y, y)))

        assert net.params.size <= 200
        _, (g,) = dc.grad_params(loss_of, [net])
        hp = 1e-6
        g_fd = np.empty_like(g)
        for i in range(g.size):
            e = np.zeros_like(g)
            e[i] = hp
            g_fd[i] = (float(dc.value(loss_of(net.params + e))) - float(dc.value(loss_of(net.params - e)))) / (2 * hp)
        worst_grad = max(worst_grad, _rel(g, g_fd))
    elapsed = time.perf_counter() - t0
    ok = worst_jac <= 1e-6 and worst_grad <= 1e-5 and elapsed < 60
    check(1, ok, f"jacobian rel {worst_jac:.2e} (<=1e-6), grad rel {worst_grad:.2e} (<=1e-5), {elapsed:.1f}s (<60s)")


# --------------------------------------------------------------------------
# 2. physical structure
# --------------------------------------------------------------------------

def test_criterion_2_physical_structure():
    rng = np.random.default_rng(7)
    eps = 1e-6
    min_eig = np.inf
    for seed in range(10):
        model = md.init_lnn(3, np.eye(3), hidden=(16, 16), seed=seed, epsilon=eps)
        M = md.assemble_mass(model, rng.uniform(-6, 6, (1000, 3)))
        min_eig = min(min_eig, np.linalg.eigvalsh(M).min())

    recon = agree = roundtrip = 0.0
    for seed in range(4):
        B = np.array([[1.0], [0.0], [0.5]])
        model = md.init_lnn(3, B, hidden=(16, 16), seed=100 + seed)
        q, qd = rng.normal(size=(2, 250, 3)) * 2
        u = rng.normal(size=(250, 1)) * 3
        M = md.assemble_mass(model, q)
        P, lam = md.eig_sym(M)
        recon = max(recon, np.abs(np.einsum("kij,kj,klj->kil", P, lam, P) - M).max())
        a = md.forward_dynamics_lnn(model, q, qd, u)
        agree = max(agree, np.abs(a - md.forward_dynamics_diag(model, q, qd, u)).max())
        roundtrip = max(roundtrip, np.abs(md.inverse_dynamics_lnn(model, q, qd, a) - u @ B.T).max())
    ok = min_eig >= eps and recon <= 1e-9 and agree <= 1e-8 and roundtrip <= 1e-8
    check(2, ok, f"min eig {min_eig:.3e} (>=1e-6 over 1e4 queries), eig recon {recon:.1e}, "
                 f"fd-vs-diag {agree:.1e} (1e3 cases), roundtrip {roundtrip:.1e}")


# --------------------------------------------------------------------------
# 3. ground-truth oracle
# --------------------------------------------------------------------------

def test_criterion_3_ground_truth_oracle():
    worst = 0.0
    for kind in mc.KINDS:
        spec = SystemSpec(kind)
        ds = tr.generate_dataset(spec, 50, 100, 0.02, seed=11)
        M = mc.mass_matrix(spec, ds.q)
        Cqd, G = mc.coriolis_gravity(spec, ds.q, ds.qd)
        res = np.einsum("kij,kj->ki", M, ds.qdd) + Cqd + G - ds.u @ spec.B.T
        worst = max(worst, np.abs(res).max())
    spec = SystemSpec("Pendulum")
    traj = mc.rollout(spec, State(np.array([2.0]), np.zeros(1)), np.zeros((10_000, 1)), 1e-3)
    E = mc.total_energy(spec, State(traj.q, traj.qd))
    drift = np.abs(E - E[0]).max() / E[0]
    check(3, worst <= 1e-10 and drift <= 0.05,
          f"record residual {worst:.1e} (<=1e-10, all systems), pendulum 10 s drift {100 * drift:.3f}% (<=5%)")


# --------------------------------------------------------------------------
# shared double-pendulum setup (criteria 4, 5, 7)
# --------------------------------------------------------------------------

DP = {"system": {"kind": "DoublePendulum"},
      "data": {"n_trajectories": 100, "steps_per_traj": 100, "dt": 0.02, "seed": 0}}


def dp_config(**blocks):
    raw = {k: dict(v) for k, v in DP.items()}
    for k, v in blocks.items():
        raw.setdefault(k, {}).update(v)
    return hn.config_from_mapping(raw)


@pytest.fixture(scope="module")
def prediction_setup():
    """All five kinds trained on the same 10k transitions per seed, same budget."""
    cfg = dp_config(model={"kinds": ["BNN", "LNN_FD", "LNN_DIAG", "LNN_ID", "LNN_COM"]},
                    train={"epochs": 100},
                    experiment={"kind": "prediction_error", "seeds": SEEDS, "rollout_length": 50,
                                "n_test_trajectories": 20})
    t0 = time.perf_counter()
    models, _ = hn.train_models(cfg, write=False)
    return cfg, models, time.perf_counter() - t0


# --------------------------------------------------------------------------
# 4. sample-efficiency ordering
# --------------------------------------------------------------------------

def test_criterion_4_sample_efficiency():
    t0 = time.perf_counter()
    lnn = hn.run_sample_efficiency(dp_config(model={"kinds": ["LNN_FD"]}, train={"epochs": 300},
                                             experiment={"seeds": SEEDS, "dataset_sizes": [2000]}))
    bnn = hn.run_sample_efficiency(dp_config(model={"kinds": ["BNN"]}, train={"epochs": 300},
                                             experiment={"seeds": SEEDS, "dataset_sizes": [10000]}))
    elapsed = time.perf_counter() - t0
    lnn_val = [r["final_val_loss"] for r in lnn.rows]
    bnn_val = [r["final_val_loss"] for r in bnn.rows]
    assert all(r["status"] == "ok" for r in lnn.rows + bnn.rows)
    a, b = float(np.median(lnn_val)), float(np.median(bnn_val))
    ok = a <= b and elapsed <= 30 * 60
    check(4, ok, f"median val loss LNN_FD@2k {a:.3e} <= BNN@10k {b:.3e}; {elapsed / 60:.1f} min (<=30)")


# --------------------------------------------------------------------------
# 5. prediction-error ordering
# --------------------------------------------------------------------------

def test_criterion_5_prediction_error(prediction_setup):
    cfg, models, _ = prediction_setup
    rep = hn.run_prediction_error(cfg, models)
    med = {k: float(np.median([r["cumulative_rmse"] for r in rep.rows if r["model"] == k]))
           for k in cfg.model_kinds}
    assert {r["space"] for r in rep.rows if r["model"] == "LNN_COM"} == {"reduced"}
    fd_vs_bnn = med["LNN_FD"] / med["BNN"]
    id_vs_fd = med["LNN_ID"] / med["LNN_FD"]
    ok = fd_vs_bnn <= 0.5 and id_vs_fd <= 1.5
    check(5, ok, f"50-step RMSE medians: LNN_FD {med['LNN_FD']:.3f}, BNN {med['BNN']:.3f} "
                 f"(ratio {fd_vs_bnn:.2f} <= 0.5), LNN_ID {med['LNN_ID']:.3f} (ratio to FD {id_vs_fd:.2f} <= 1.5)")


# --------------------------------------------------------------------------
# 6. planner closed loop
# --------------------------------------------------------------------------

def test_criterion_6_planner_closed_loop():
    spec = SystemSpec("Pendulum")
    cfg = pl.PlanConfig(horizon=30, n_samples=256, dt=0.02, u_limit=spec.u_max)
    reward = pl.RewardFn()
    s0 = State(np.zeros(1), np.zeros(1))

    t0 = time.perf_counter()
    ref, _ = pl.receding_horizon_run(spec, md.AnalyticModel(spec), None, reward, s0, 300, cfg)
    t_ref = time.perf_counter() - t0
    err = reward.angle_error(ref.q)[:, 0]
    reached = int(np.argmax(err <= 0.2)) if np.any(err <= 0.2) else None
    R_ref = pl.closed_loop_return(ref, reward)

    data = tr.generate_dataset(spec, 30, 100, 0.02, seed=0)
    model, _ = tr.train_model(data, tr.TrainConfig("LNN_FD", epochs=100, seed=0), spec)
    t0 = time.perf_counter()
    run, _ = pl.receding_horizon_run(spec, model, None, reward, s0, 300, cfg)
    t_lnn = time.perf_counter() - t0
    R_lnn = pl.closed_loop_return(run, reward)

    ok = reached is not None and R_lnn >= 0.8 * R_ref and max(t_ref, t_lnn) <= 300
    check(6, ok, f"reference reaches |q-pi|<=0.2 at step {reached}; return ref {R_ref:.1f}, "
                 f"LNN_FD {R_lnn:.1f} (ratio {R_lnn / R_ref:.2f} >= 0.8); run times {t_ref:.0f}s / {t_lnn:.0f}s (<=300s)")


# --------------------------------------------------------------------------
# 7. timing report
# --------------------------------------------------------------------------

def test_criterion_7_inference_frequency(prediction_setup, tmp_path):
    cfg, models, _ = prediction_setup
    cfg = dataclasses.replace(cfg, kind="inference_frequency", warmup=20, measured=200)
    rep = hn.run_inference_frequency(cfg, models)
    rep.write(tmp_path)
    rows = {r["model"]: r for r in rep.rows}
    complete = set(rows) == set(md.MODEL_KINDS) and all(r["n_replans"] >= 200 for r in rows.values())
    stats = all(all(k in r for k in ("freq_min_hz", "freq_q1_hz", "freq_median_hz", "freq_q3_hz", "freq_max_hz"))
                for r in rows.values())
    ratio = rows["LNN_DIAG"]["time_median_s"] / rows["LNN_FD"]["time_median_s"]
    summary = ", ".join(f"{k} {rows[k]['freq_median_hz']:.1f} Hz" for k in md.MODEL_KINDS if k in rows)
    check(7, complete and stats and ratio <= 3.0,
          f"median replan frequency: {summary}; LNN_DIAG/LNN_FD median cost {ratio:.2f} (<=3)")


# --------------------------------------------------------------------------
# 8. reproducibility
# --------------------------------------------------------------------------

def _all_reports(cfg):
    trained, curves = hn.train_models(cfg, write=False)
    out = {"curves": {k: dataclasses.asdict(c) for k, c in curves.items()}}
    for name in ("sample_efficiency", "prediction_error", "inference_frequency", "planner_eval"):
        fn = hn.RUNNERS[name]
        rep = fn(cfg) if name == "sample_efficiency" else fn(cfg, trained)
        strip = lambda rows: [{k: v for k, v in r.items() if k not in rep.timing_columns} for r in rows]  # noqa: E731
        out[name] = (rep.metric_rows(), {t: strip(rows) for t, rows in rep.tables.items()},
                     rep.metadata["config_hash"])
    return out


def _same(a, b):
    """Bit-level equality, treating NaN as equal to NaN."""
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and np.isnan(a):
        return isinstance(b, float) and np.isnan(b)
    return a == b


def test_criterion_8_reproducibility():
    cfg = hn.config_from_mapping({
        "system": {"kind": "DoublePendulum"},
        "data": {"n_trajectories": 6, "steps_per_traj": 40},
        "model": {"kinds": list(md.MODEL_KINDS), "hidden": [16, 16]},
        "train": {"epochs": 3, "batch_size": 64},
        "plan": {"horizon": 8, "n_samples": 32},
        "experiment": {"seeds": [0, 1], "dataset_sizes": [120, 240], "rollout_length": 20,
                       "n_test_trajectories": 3, "n_steps": 10, "warmup": 2, "measured": 5},
    })
    first, second = _all_reports(cfg), _all_reports(cfg)
    mismatched = [k for k in first if not _same(first[k], second[k])]
    check(8, not mismatched, "all non-timing metrics bit-identical across two runs"
          if not mismatched else f"differences in {mismatched}")
