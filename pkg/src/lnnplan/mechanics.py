"""Analytic rigid-body systems used as ground truth.

Conventions: angles are measured from the downward vertical, g = 9.81,
and the potential energy is zero at the lowest configuration. All
functions broadcast over leading batch dimensions of ``q``/``qd``/``u``.

Double pendulum uses *relative* joint angles (q2 is link 2 relative to
link 1), point masses at the link tips.

PlanarTorso is a free rigid body in the sagittal plane with generalized
coordinates (x, z, pitch). It stands in for a floating base and is
actuated directly by a world-frame force pair plus a pitch torque.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

GRAVITY = 9.81

KINDS = ("Pendulum", "DoublePendulum", "CartPole", "PlanarTorso")

DEFAULT_PARAMS = {
    "Pendulum": {"m": 1.0, "l": 1.0},
    "DoublePendulum": {"m1": 1.0, "m2": 1.0, "l1": 1.0, "l2": 1.0},
    "CartPole": {"mc": 1.0, "mp": 0.5, "l": 1.0},
    "PlanarTorso": {"m": 1.0, "inertia": 0.1},
}

# actuator bound per input channel (N m or N)
DEFAULT_U_MAX = {"Pendulum": 8.0, "DoublePendulum": 12.0, "CartPole": 10.0, "PlanarTorso": 15.0}

# coordinates kept by the reduced (centre-of-mass style) model
DEFAULT_REDUCED = {"Pendulum": (0,), "DoublePendulum": (0,), "CartPole": (0,), "PlanarTorso": (0, 1, 2)}


class MechanicsError(ValueError):
    pass


class State(NamedTuple):
    q: np.ndarray
    qd: np.ndarray


@dataclass
class SystemSpec:
    kind: str
    params: dict = field(default_factory=dict)
    g: float = GRAVITY
    u_max: float | None = None
    reduced_index: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MechanicsError(f"unknown system kind {self.kind!r}; expected one of {KINDS}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise MechanicsError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        if any(v <= 0 for v in merged.values()):
            raise MechanicsError(f"masses, lengths and inertias must be positive: {merged}")
        self.params = merged
        if self.u_max is None:
            self.u_max = DEFAULT_U_MAX[self.kind]
        if self.reduced_index is None:
            self.reduced_index = DEFAULT_REDUCED[self.kind]
        self.reduced_index = tuple(int(i) for i in self.reduced_index)

    @property
    def n(self) -> int:
        return {"Pendulum": 1, "DoublePendulum": 2, "CartPole": 2, "PlanarTorso": 3}[self.kind]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def B(self) -> np.ndarray:
        if self.kind == "CartPole":
            return np.array([[1.0], [0.0]])
        return np.eye(self.n)


@dataclass
class Trajectory:
    """States at t = k*dt; ``controls[k]`` and ``qdd[k]`` drive step k -> k+1."""

    q: np.ndarray  # (K+1, n)
    qd: np.ndarray  # (K+1, n)
    controls: np.ndarray  # (K, m)
    qdd: np.ndarray  # (K, n)
    dt: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.q)) * self.dt

    def __len__(self):
        return len(self.q)

    def state(self, k: int) -> State:
        return State(self.q[k], self.qd[k])


def _split(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise MechanicsError(f"expected trailing dimension {n}, got shape {x.shape}")
    return x


def mass_matrix(spec: SystemSpec, q) -> np.ndarray:
    q = _split(q, spec.n)
    p = spec.params
    lead = q.shape[:-1]
    if spec.kind == "Pendulum":
        return np.broadcast_to(np.array([[p["m"] * p["l"] ** 2]]), lead + (1, 1)).copy()
    if spec.kind == "DoublePendulum":
        m1, m2, l1, l2 = p["m1"], p["m2"], p["l1"], p["l2"]
        c2 = np.cos(q[..., 1])
        M = np.empty(lead + (2, 2))
        M[..., 0, 0] = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2
        M[..., 0, 1] = M[..., 1, 0] = m2 * l2 ** 2 + m2 * l1 * l2 * c2
        M[..., 1, 1] = m2 * l2 ** 2
        return M
    if spec.kind == "CartPole":
        mc, mp, l = p["mc"], p["mp"], p["l"]
        M = np.empty(lead + (2, 2))
        M[..., 0, 0] = mc + mp
        M[..., 0, 1] = M[..., 1, 0] = mp * l * np.cos(q[..., 1])
        M[..., 1, 1] = mp * l ** 2
        return M
    d = np.array([p["m"], p["m"], p["inertia"]])
    return np.broadcast_to(np.diag(d), lead + (3, 3)).copy()


def coriolis_gravity(spec: SystemSpec, q, qd):
    """Return (C(q, qd) qd, G(q))."""
    q = _split(q, spec.n)
    qd = _split(qd, spec.n)
    p, g = spec.params, spec.g
    Cqd = np.zeros(np.broadcast_shapes(q.shape, qd.shape))
    G = np.zeros(q.shape)
    if spec.kind == "Pendulum":
        G[..., 0] = p["m"] * g * p["l"] * np.sin(q[..., 0])
    elif spec.kind == "DoublePendulum":
        m1, m2, l1, l2 = p["m1"], p["m2"], p["l1"], p["l2"]
        h = m2 * l1 * l2 * np.sin(q[..., 1])
        w1, w2 = qd[..., 0], qd[..., 1]
        Cqd[..., 0] = -h * (2 * w1 * w2 + w2 ** 2)
        Cqd[..., 1] = h * w1 ** 2
        s12 = np.sin(q[..., 0] + q[..., 1])
        G[..., 0] = (m1 + m2) * g * l1 * np.sin(q[..., 0]) + m2 * g * l2 * s12
        G[..., 1] = m2 * g * l2 * s12
    elif spec.kind == "CartPole":
        mp, l = p["mp"], p["l"]
        Cqd[..., 0] = -mp * l * np.sin(q[..., 1]) * qd[..., 1] ** 2
        G[..., 1] = mp * g * l * np.sin(q[..., 1])
    else:
        G[..., 1] = p["m"] * g
    return Cqd, G


def potential_energy(spec: SystemSpec, q) -> np.ndarray:
    q = _split(q, spec.n)
    p, g = spec.params, spec.g
    if spec.kind == "Pendulum":
        return p["m"] * g * p["l"] * (1 - np.cos(q[..., 0]))
    if spec.kind == "DoublePendulum":
        m1, m2, l1, l2 = p["m1"], p["m2"], p["l1"], p["l2"]
        return ((m1 + m2) * g * l1 * (1 - np.cos(q[..., 0]))
                + m2 * g * l2 * (1 - np.cos(q[..., 0] + q[..., 1])))
    if spec.kind == "CartPole":
        return p["mp"] * g * p["l"] * (1 - np.cos(q[..., 1]))
    return p["m"] * g * q[..., 1]


def total_energy(spec: SystemSpec, state: State) -> np.ndarray:
    q, qd = state
    M = mass_matrix(spec, q)
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)
    return kinetic + potential_energy(spec, q)


def generalized_force(spec: SystemSpec, u) -> np.ndarray:
    u = _split(u, spec.m)
    return u @ spec.B.T


def forward_dynamics_gt(spec: SystemSpec, q, qd, u) -> np.ndarray:
    M = mass_matrix(spec, q)
    Cqd, G = coriolis_gravity(spec, q, qd)
    rhs = generalized_force(spec, u) - Cqd - G
    M, rhs = np.broadcast_arrays(M, rhs[..., None])
    qdd = np.linalg.solve(M, rhs)[..., 0]
    if not np.all(np.isfinite(qdd)):
        raise FloatingPointError("non-finite acceleration from ground-truth dynamics")
    return qdd


def semi_implicit(q, qd, qdd, dt):
    """Velocity first, then position with the updated velocity."""
    qd_next = qd + qdd * dt
    return State(q + qd_next * dt, qd_next)


def step_semi_implicit(spec: SystemSpec, state: State, u, dt: float) -> State:
    if not dt > 0:
        raise MechanicsError(f"time step must be positive, got {dt}")
    q, qd = state
    qdd = forward_dynamics_gt(spec, q, qd, u)
    return semi_implicit(np.asarray(q, float), np.asarray(qd, float), qdd, dt)


def rollout(spec: SystemSpec, state0: State, controls: Sequence, dt: float) -> Trajectory:
    if not dt > 0:
        raise MechanicsError(f"time step must be positive, got {dt}")
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, spec.m)
    K = len(controls)
    q = np.empty((K + 1, spec.n))
    qd = np.empty((K + 1, spec.n))
    qdd = np.empty((K, spec.n))
    q[0], qd[0] = state0
    for k in range(K):
        qdd[k] = forward_dynamics_gt(spec, q[k], qd[k], controls[k])
        q[k + 1], qd[k + 1] = semi_implicit(q[k], qd[k], qdd[k], dt)
    return Trajectory(q, qd, controls, qdd, dt)


def reduce_state(spec: SystemSpec, q, qd) -> State:
    """Projection onto the reduced coordinates kept by the CoM-style model."""
    idx = list(spec.reduced_index)
    return State(np.asarray(q)[..., idx], np.asarray(qd)[..., idx])
