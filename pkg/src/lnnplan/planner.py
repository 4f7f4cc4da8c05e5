"""Sampling-based receding-horizon planner over a learned (or analytic) dynamics model.

Objective for a sequence a_0..a_{H-1} from state s_0:

    sum_{k<H} gamma^k r(s_k, a_k) + gamma^H V(s_H),   s_{k+1} = model(s_k, a_k)

maximized by exponentially weighted averaging of Gaussian perturbations
of a nominal sequence, warm-started by shifting the previous solution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import mechanics
from . import models as md
from .mechanics import State, SystemSpec


class PlanningFailure(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class PlanConfig:
    horizon: int = 30
    gamma: float = 0.99
    n_samples: int = 256
    sigma: float = 2.0
    temperature: float = 0.01
    dt: float = 0.02
    seed: int = 0
    u_limit: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class RewardFn:
    """Swing-up / balance reward in (0, 1].

    ``r = exp(-(w_angle * sum(1 - cos(q_i - target)) + w_vel * |qd|^2 + w_u * |u|^2))``
    over the angle coordinates ``coords`` (all coordinates when None).
    """

    task: str = "swing_up"
    target: float = np.pi
    w_angle: float = 1.0
    w_vel: float = 0.01
    w_u: float = 0.001
    coords: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.task != "swing_up":
            raise ValueError(f"unknown task {self.task!r}")

    def __call__(self, q, qd, u):
        q, qd, u = np.asarray(q), np.asarray(qd), np.asarray(u)
        idx = slice(None) if self.coords is None else list(self.coords)
        ang = np.sum(1.0 - np.cos(q[..., idx] - self.target), axis=-1)
        vel = np.sum(qd[..., idx] ** 2, axis=-1)
        eff = np.sum(u ** 2, axis=-1)
        return np.exp(-(self.w_angle * ang + self.w_vel * vel + self.w_u * eff))

    def angle_error(self, q):
        """Wrapped distance to the target, per scored coordinate."""
        idx = slice(None) if self.coords is None else list(self.coords)
        d = np.asarray(q)[..., idx] - self.target
        return np.abs((d + np.pi) % (2 * np.pi) - np.pi)


@dataclass
class PlanResult:
    actions: np.ndarray  # (H, m)
    expected_return: float
    sample_returns: np.ndarray  # (n_samples,)
    weights: np.ndarray
    wall_time: float
    nominal: np.ndarray = field(repr=False, default=None)


def score_trajectory(model, value, reward: RewardFn, state0: State, actions, config: PlanConfig):
    """Discounted return of one (H, m) sequence, or of each row of an (N, H, m) stack.

    Samples whose rollout produces non-finite numbers score -inf.
    """
    actions = np.asarray(actions, dtype=np.float64)
    single = actions.ndim == 2
    A = actions[None] if single else actions
    N, H = A.shape[:2]
    q0, qd0 = state0
    q = np.broadcast_to(np.asarray(q0, float), (N, np.shape(q0)[-1])).copy()
    qd = np.broadcast_to(np.asarray(qd0, float), (N, np.shape(qd0)[-1])).copy()
    total = np.zeros(N)
    with np.errstate(all="ignore"):
        try:
            for k in range(H):
                total += config.gamma ** k * reward(q, qd, A[:, k])
                q, qd = md.predict_next(model, State(q, qd), A[:, k], config.dt)
            if value is not None:
                total += config.gamma ** H * value(q, qd)
        except (FloatingPointError, np.linalg.LinAlgError):
            total[:] = np.nan
    total = np.where(np.isfinite(total), total, -np.inf)
    return float(total[0]) if single else total


def softmax_weights(returns: np.ndarray, temperature: float) -> np.ndarray:
    R = np.asarray(returns, float)
    finite = np.isfinite(R)
    w = np.zeros_like(R)
    w[finite] = np.exp((R[finite] - R[finite].max()) / temperature)
    return w / w.sum()


def sample_sequences(nominal, config: PlanConfig, replan_index: int = 0) -> np.ndarray:
    """Perturbed copies of ``nominal``. The noise block of sample i depends only on
    (seed, replan_index, i), so splitting samples across workers changes nothing."""
    nominal = np.asarray(nominal, float)
    rng = np.random.default_rng([config.seed, replan_index])
    eps = rng.standard_normal((config.n_samples,) + nominal.shape) * config.sigma
    samples = nominal[None] + eps
    if config.u_limit is not None:
        samples = np.clip(samples, -config.u_limit, config.u_limit)
    return samples


def mppi_plan(model, value, reward: RewardFn, state0: State, nominal, config: PlanConfig,
              replan_index: int = 0) -> PlanResult:
    t0 = time.perf_counter()
    nominal = np.asarray(nominal, float)
    samples = sample_sequences(nominal, config, replan_index)
    R = score_trajectory(model, value, reward, state0, samples, config)
    if not np.any(np.isfinite(R)):
        raise PlanningFailure(
            f"all {config.n_samples} sampled rollouts were non-finite "
            f"(state q={np.asarray(state0[0]).tolist()}, qd={np.asarray(state0[1]).tolist()})"
        )
    w = softmax_weights(R, config.temperature)
    actions = np.einsum("i,ihm->hm", w, samples)
    expected = score_trajectory(model, value, reward, state0, actions, config)
    return PlanResult(actions, expected, R, w, time.perf_counter() - t0, nominal)


def shift_nominal(actions: np.ndarray) -> np.ndarray:
    """Drop the executed action and repeat the last one."""
    return np.concatenate([actions[1:], actions[-1:]], axis=0)


def receding_horizon_run(spec: SystemSpec, model, value, reward: RewardFn, state0: State,
                         n_steps: int, config: PlanConfig, nominal=None):
    """Closed loop against the ground-truth simulator.

    Returns (Trajectory, list of PlanResult); ``PlanResult.wall_time`` is the
    per-replan wall clock.
    """
    m = spec.m
    nominal = np.zeros((config.horizon, m)) if nominal is None else np.asarray(nominal, float)
    q = np.empty((n_steps + 1, spec.n))
    qd = np.empty((n_steps + 1, spec.n))
    controls = np.empty((n_steps, m))
    qdd = np.empty((n_steps, spec.n))
    q[0], qd[0] = state0
    results = []
    for k in range(n_steps):
        s = md.project_state(model, q[k], qd[k])
        try:
            res = mppi_plan(model, value, reward, s, nominal, config, replan_index=k)
        except PlanningFailure as err:
            raise PlanningFailure(str(err), step=k) from err
        a = res.actions[0]
        if config.u_limit is not None:
            a = np.clip(a, -config.u_limit, config.u_limit)
        controls[k] = a
        qdd[k] = mechanics.forward_dynamics_gt(spec, q[k], qd[k], a)
        q[k + 1], qd[k + 1] = mechanics.semi_implicit(q[k], qd[k], qdd[k], config.dt)
        nominal = shift_nominal(res.actions)
        results.append(res)
    return mechanics.Trajectory(q, qd, controls, qdd, config.dt), results


def closed_loop_return(traj: mechanics.Trajectory, reward: RewardFn, model=None) -> float:
    """Undiscounted sum of rewards collected along an executed trajectory."""
    q, qd = traj.q[:-1], traj.qd[:-1]
    if model is not None:
        q, qd = md.project_state(model, q, qd)
    return float(np.sum(reward(q, qd, traj.controls)))
