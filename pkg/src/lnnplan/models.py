"""Learned dynamics models: Lagrangian networks (four variants) and a black-box baseline.

Lagrangian convention: ``L = 1/2 qd^T M(q) qd - V(q)`` so that the velocity
Hessian of L is exactly ``M``. With ``M = Y Y^T + eps I`` and ``Y_k = dY/dq_k``
the Euler-Lagrange pieces reduce to

    dL/dq_k       = (Y_k^T qd) . (Y^T qd) - dV/dq_k
    (d2L/dq dqd) qd = (Y_d Y^T + Y Y_d^T) qd,   Y_d = sum_k Y_k qd_k

and the dynamics read ``M qdd = dL/dq - (d2L/dq dqd) qd + B u + F``.
All of it is written with diff_core ops, so the same code serves inference
(plain arrays) and training (recorded parameters).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diff_core as dc
from . import mechanics
from .diff_core import Mlp, mlp_eval, mlp_eval_jacobian
from .mechanics import State, SystemSpec

LNN_KINDS = ("LNN_FD", "LNN_DIAG", "LNN_ID")
MODEL_KINDS = ("BNN",) + LNN_KINDS + ("LNN_COM",)
CHECKPOINT_KINDS = MODEL_KINDS + ("ESTIMATOR", "VALUE")


class ContractViolation(ValueError):
    pass


# --------------------------------------------------------------------------
# Model containers
# --------------------------------------------------------------------------


@dataclass
class LnnModel:
    y_net: Mlp
    v_net: Mlp
    f_net: Mlp | None
    B: np.ndarray
    epsilon: float = 1e-6
    kind: str = "LNN_FD"
    softplus_diag: bool = True

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        n = self.n
        if self.y_net.n_in != n or self.y_net.n_out != n * (n + 1) // 2:
            raise dc.ShapeError(f"y_net must map {n} -> {n * (n + 1) // 2}")
        if self.v_net.n_in != n or self.v_net.n_out != 1:
            raise dc.ShapeError(f"v_net must map {n} -> 1")
        if self.f_net is not None and (self.f_net.n_in != self._f_in or self.f_net.n_out != n):
            raise dc.ShapeError(f"f_net must map {self._f_in} -> {n}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def _f_in(self) -> int:
        return 2 * self.n

    def nets(self) -> dict[str, Mlp]:
        out = {"y": self.y_net, "v": self.v_net}
        if self.f_net is not None:
            out["f"] = self.f_net
        return out

    def with_params(self, flat: dict[str, np.ndarray]) -> "LnnModel":
        kw = {f"{k}_net": Mlp(net.layer_sizes, flat[k], net.activation) for k, net in self.nets().items()}
        return _replace(self, **kw)


@dataclass
class ComLnnModel(LnnModel):
    """Lagrangian model over reduced coordinates. There is no actuation
    matrix: the control enters only through the force net F(X, Xd, u)."""

    kind: str = "LNN_COM"
    n_reduced: int = 0
    m_input: int = 0
    reduced_index: tuple[int, ...] = ()

    def __post_init__(self):
        self.B = np.zeros((self.n_reduced, 0))
        self.reduced_index = tuple(int(i) for i in self.reduced_index)
        super().__post_init__()

    @property
    def m(self) -> int:
        return self.m_input

    @property
    def _f_in(self) -> int:
        return 2 * self.n_reduced + self.m_input


@dataclass
class BnnModel:
    """Black-box next-state regressor with fixed input/output standardization."""

    net: Mlp
    n: int
    m: int
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None
    kind: str = "BNN"

    def __post_init__(self):
        if self.net.n_in != 2 * self.n + self.m or self.net.n_out != 2 * self.n:
            raise dc.ShapeError(f"BNN net must map {2 * self.n + self.m} -> {2 * self.n}")
        for name, size in (("in_mean", 2 * self.n + self.m), ("in_std", 2 * self.n + self.m),
                           ("out_mean", 2 * self.n), ("out_std", 2 * self.n)):
            default = 0.0 if name.endswith("mean") else 1.0
            arr = getattr(self, name)
            setattr(self, name, np.full(size, default) if arr is None else np.asarray(arr, float))

    def nets(self) -> dict[str, Mlp]:
        return {"net": self.net}

    def with_params(self, flat):
        return _replace(self, net=Mlp(self.net.layer_sizes, flat["net"], self.net.activation))


@dataclass
class StateEstimator:
    """Observation -> generalized coordinates. ``net=None`` is the identity
    on the leading ``n`` observation entries (fully observed systems)."""

    n: int
    net: Mlp | None = None
    kind: str = "ESTIMATOR"

    def nets(self):
        return {} if self.net is None else {"net": self.net}

    def with_params(self, flat):
        return _replace(self, net=Mlp(self.net.layer_sizes, flat["net"], self.net.activation))


@dataclass
class ValueModel:
    """Terminal value over the full state (q, qd)."""

    net: Mlp
    out_mean: float = 0.0
    out_scale: float = 1.0
    heldout_mse: float | None = None
    kind: str = "VALUE"

    def nets(self):
        return {"net": self.net}

    def with_params(self, flat):
        return _replace(self, net=Mlp(self.net.layer_sizes, flat["net"], self.net.activation))

    def __call__(self, q, qd):
        x = np.concatenate(np.broadcast_arrays(q, qd), axis=-1)
        return mlp_eval(self.net, x)[..., 0] * self.out_scale + self.out_mean


@dataclass
class AnalyticModel:
    """Ground-truth dynamics wrapped as a model (planner reference)."""

    spec: SystemSpec
    kind: str = "ANALYTIC"

    @property
    def n(self):
        return self.spec.n

    @property
    def m(self):
        return self.spec.m

    def nets(self):
        return {}


def _replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def init_lnn(n: int, B, hidden: Sequence[int] = (64, 64), seed: int = 0, kind: str = "LNN_FD",
             epsilon: float = 1e-6, activation: str = "tanh", learn_force: bool = True) -> LnnModel:
    if kind not in LNN_KINDS:
        raise ValueError(f"kind must be one of {LNN_KINDS}")
    if activation == "relu":
        raise dc.InvalidArchitectureError("physics nets need a twice-differentiable activation")
    ss = np.random.SeedSequence(seed).generate_state(3)
    h = list(hidden)
    y = dc.mlp_init([n] + h + [n * (n + 1) // 2], int(ss[0]), activation)
    v = dc.mlp_init([n] + h + [1], int(ss[1]), activation)
    f = dc.mlp_init([2 * n] + h + [n], int(ss[2]), activation) if learn_force else None
    return LnnModel(y, v, f, np.asarray(B, float), epsilon, kind)


def init_com(n_reduced: int, m_input: int, reduced_index, hidden=(64, 64), seed: int = 0,
             epsilon: float = 1e-6, activation: str = "tanh") -> ComLnnModel:
    if activation == "relu":
        raise dc.InvalidArchitectureError("physics nets need a twice-differentiable activation")
    ss = np.random.SeedSequence(seed).generate_state(3)
    h, n = list(hidden), n_reduced
    y = dc.mlp_init([n] + h + [n * (n + 1) // 2], int(ss[0]), activation)
    v = dc.mlp_init([n] + h + [1], int(ss[1]), activation)
    f = dc.mlp_init([2 * n + m_input] + h + [n], int(ss[2]), activation)
    return ComLnnModel(y, v, f, None, epsilon, n_reduced=n, m_input=m_input,
                       reduced_index=tuple(reduced_index))


def init_bnn(n: int, m: int, hidden=(64, 64), seed: int = 0, activation: str = "tanh") -> BnnModel:
    net = dc.mlp_init([2 * n + m] + list(hidden) + [2 * n], seed, activation)
    return BnnModel(net, n, m)


def init_model(kind: str, spec: SystemSpec, hidden=(64, 64), seed: int = 0, epsilon: float = 1e-6):
    if kind == "BNN":
        return init_bnn(spec.n, spec.m, hidden, seed)
    if kind == "LNN_COM":
        idx = spec.reduced_index
        return init_com(len(idx), spec.m, idx, hidden, seed, epsilon)
    if kind == "ANALYTIC":
        return AnalyticModel(spec)
    return init_lnn(spec.n, spec.B, hidden, seed, kind, epsilon)


# --------------------------------------------------------------------------
# Lagrangian structure
# --------------------------------------------------------------------------


def _tril_layout(n: int):
    """Selection tensor S[p, i, j] (row-major lower triangle) and a diagonal mask."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1)]
    S = np.zeros((len(pairs), n, n))
    diag = np.zeros(len(pairs))
    for p, (i, j) in enumerate(pairs):
        S[p, i, j] = 1.0
        diag[p] = float(i == j)
    return S, diag


def _net_params(params, name):
    return None if params is None else params.get(name)


def _lower_factor(model: LnnModel, q, params=None, with_derivative=True):
    """Y(q) and optionally dY/dq as (..., n, n, n) with the derivative index last."""
    S, diag = _tril_layout(model.n)
    yp = _net_params(params, "y")
    if with_derivative:
        raw, rawJ = mlp_eval_jacobian(model.y_net, q, params=yp)
    else:
        raw, rawJ = mlp_eval(model.y_net, q, params=yp), None
    if model.softplus_diag:
        off = 1.0 - diag
        entries = dc.add(dc.mul(raw, off), dc.mul(dc.softplus(raw), diag))
        if rawJ is not None:
            slope = dc.add(off, dc.mul(dc.sigmoid(raw), diag))
            rawJ = dc.mul(rawJ, dc.reshape(slope, dc.value(slope).shape + (1,)))
    else:
        entries = raw
    Y = dc.einsum("...p,pij->...ij", entries, S)
    dY = None if rawJ is None else dc.einsum("...pk,pij->...ijk", rawJ, S)
    return Y, dY


def _gram(model, Y):
    return dc.add(dc.einsum("...ij,...kj->...ik", Y, Y), model.epsilon * np.eye(model.n))


def assemble_mass(model: LnnModel, q, params=None):
    Y, _ = _lower_factor(model, q, params, with_derivative=False)
    return _gram(model, Y)


def potential(model: LnnModel, q, params=None):
    return dc.getitem(mlp_eval(model.v_net, q, params=_net_params(params, "v")), (Ellipsis, 0))


def lagrangian(model: LnnModel, q, qd, params=None):
    M = assemble_mass(model, q, params)
    kinetic = dc.mul(0.5, dc.einsum("...i,...i->...", qd, dc.einsum("...ij,...j->...i", M, qd)))
    return dc.sub(kinetic, potential(model, q, params))


def external_force(model: LnnModel, q, qd, u=None, params=None):
    if model.f_net is None:
        return np.zeros(np.broadcast_shapes(dc.value(q).shape, dc.value(qd).shape))
    parts = [q, qd]
    if isinstance(model, ComLnnModel) and model.m_input:
        parts.append(np.broadcast_to(u, dc.value(q).shape[:-1] + (model.m_input,)))
    return mlp_eval(model.f_net, dc.concat(parts, axis=-1), params=_net_params(params, "f"))


def euler_lagrange_terms(model: LnnModel, q, qd, params=None):
    """Return (M, dL/dq, (d2L/dq dqd) qd)."""
    Y, dY = _lower_factor(model, q, params)
    M = _gram(model, Y)
    a = dc.einsum("...ji,...j->...i", Y, qd)  # Y^T qd
    b = dc.einsum("...jik,...j->...ik", dY, qd)  # column k: Y_k^T qd
    _, vJ = mlp_eval_jacobian(model.v_net, q, params=_net_params(params, "v"))
    dV = dc.getitem(vJ, (Ellipsis, 0, slice(None)))
    dLdq = dc.sub(dc.einsum("...ik,...i->...k", b, a), dV)
    Yd = dc.einsum("...ijk,...k->...ij", dY, qd)
    mixed = dc.add(dc.einsum("...ij,...j->...i", Yd, a),
                   dc.einsum("...ij,...j->...i", Y, dc.einsum("...ji,...j->...i", Yd, qd)))
    return M, dLdq, mixed


def _bu(model: LnnModel, u):
    if model.m == 0:
        return 0.0
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != model.m:
        raise dc.ShapeError(f"control has shape {u.shape}, model expects (..., {model.m})")
    return u @ model.B.T


def _rhs(model, q, qd, u, params):
    M, dLdq, mixed = euler_lagrange_terms(model, q, qd, params)
    rhs = dc.add(dc.sub(dLdq, mixed), external_force(model, q, qd, u, params))
    rhs = dc.add(rhs, _bu(model, u))
    return M, rhs


def forward_dynamics_lnn(model: LnnModel, q, qd, u, params=None):
    M, rhs = _rhs(model, q, qd, u, params)
    return dc.solve(M, rhs)


def inverse_dynamics_lnn(model: LnnModel, q, qd, qdd, params=None):
    """Generalized force B u that produces ``qdd``; no solve or inverse on this path."""
    M, dLdq, mixed = euler_lagrange_terms(model, q, qd, params)
    tau = dc.add(dc.sub(dc.einsum("...ij,...j->...i", M, qdd), dLdq), mixed)
    return dc.sub(tau, external_force(model, q, qd, None, params))


def com_forward_dynamics(model: ComLnnModel, X, Xd, u=None, params=None):
    if dc.value(X).shape[-1] != model.n or dc.value(Xd).shape[-1] != model.n:
        raise dc.ShapeError(f"reduced state must have trailing dimension {model.n}")
    if model.m_input and u is None:
        raise dc.ShapeError("this reduced model takes a control input")
    M, dLdq, mixed = euler_lagrange_terms(model, X, Xd, params)
    rhs = dc.add(dc.sub(dLdq, mixed), external_force(model, X, Xd, u, params))
    return dc.solve(M, rhs)


# --------------------------------------------------------------------------
# Symmetric eigendecomposition (cyclic Jacobi, batched)
# --------------------------------------------------------------------------


def eig_sym(M, tol: float = 1e-9, max_sweeps: int = 60):
    """Return (P, lam) with ``M = P diag(lam) P^T``, eigenvector columns,
    eigenvalues ascending. Works on (..., n, n) stacks."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ContractViolation(f"expected square matrices, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - np.swapaxes(M, -1, -2)).max(initial=0.0) > tol * scale:
        raise ContractViolation("eig_sym needs a symmetric matrix")
    lead, n = M.shape[:-2], M.shape[-1]
    A = 0.5 * (M + np.swapaxes(M, -1, -2)).reshape(-1, n, n)
    P = np.broadcast_to(np.eye(n), A.shape).copy()
    offmask = 1.0 - np.eye(n)
    for _ in range(max_sweeps):
        # summed directly: total minus diagonal cancels to zero long before convergence
        off = np.sum((A * offmask) ** 2, axis=(1, 2))
        if np.all(off <= 1e-32 * np.sum(A * A, axis=(1, 2))):
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = A[:, p, r]
                active = apr != 0.0
                if not active.any():
                    continue
                # theta overflows to inf for negligible apr; t then comes out 0 (no rotation)
                with np.errstate(over="ignore"):
                    theta = np.where(active, (A[:, r, r] - A[:, p, p]) / np.where(active, 2.0 * apr, 1.0), 0.0)
                    t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(theta == 0.0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c_, s_ = c[:, None], s[:, None]
                colp, colr = A[:, :, p].copy(), A[:, :, r].copy()
                A[:, :, p] = c_ * colp - s_ * colr
                A[:, :, r] = s_ * colp + c_ * colr
                rowp, rowr = A[:, p, :].copy(), A[:, r, :].copy()
                A[:, p, :] = c_ * rowp - s_ * rowr
                A[:, r, :] = s_ * rowp + c_ * rowr
                A[:, p, r] = A[:, r, p] = 0.0
                pp, pr = P[:, :, p].copy(), P[:, :, r].copy()
                P[:, :, p] = c_ * pp - s_ * pr
                P[:, :, r] = s_ * pp + c_ * pr
    lam = np.diagonal(A, axis1=1, axis2=2)
    order = np.argsort(lam, axis=1)
    lam = np.take_along_axis(lam, order, axis=1)
    P = np.take_along_axis(P, order[:, None, :], axis=2)
    return P.reshape(lead + (n, n)), lam.reshape(lead + (n,))


def forward_dynamics_diag(model: LnnModel, q, qd, u):
    """Same accelerations as :func:`forward_dynamics_lnn`, via ``M^-1 = P L^-1 P^T``."""
    M, rhs = _rhs(model, q, qd, u, None)
    P, lam = eig_sym(M)
    lam = np.maximum(lam, model.epsilon)
    coeff = np.einsum("...ji,...j->...i", P, rhs) / lam
    return np.einsum("...ij,...j->...i", P, coeff)


# --------------------------------------------------------------------------
# One-step prediction
# --------------------------------------------------------------------------


def project_state(model, q, qd) -> State:
    """Map a full state to the coordinates the model predicts."""
    if isinstance(model, ComLnnModel):
        idx = list(model.reduced_index)
        return State(np.asarray(q)[..., idx], np.asarray(qd)[..., idx])
    return State(q, qd)


def accelerations(model, q, qd, u, params=None):
    if isinstance(model, ComLnnModel):
        return com_forward_dynamics(model, q, qd, u, params)
    if isinstance(model, LnnModel):
        if model.kind == "LNN_DIAG" and params is None:
            return forward_dynamics_diag(model, q, qd, u)
        return forward_dynamics_lnn(model, q, qd, u, params)
    if isinstance(model, AnalyticModel):
        return mechanics.forward_dynamics_gt(model.spec, q, qd, u)
    raise TypeError(f"{type(model).__name__} does not produce accelerations")


def predict_next(model, state: State, u, dt: float, params=None) -> State:
    q, qd = state
    if isinstance(model, BnnModel):
        x = dc.concat([q, qd, np.broadcast_to(u, np.shape(q)[:-1] + (model.m,))], axis=-1)
        x = (x - model.in_mean) / model.in_std
        y = dc.add(dc.mul(mlp_eval(model.net, x, params=_net_params(params, "net")), model.out_std),
                   model.out_mean)
        return State(dc.getitem(y, (Ellipsis, slice(0, model.n))),
                     dc.getitem(y, (Ellipsis, slice(model.n, 2 * model.n))))
    qdd = accelerations(model, q, qd, u, params)
    qd_next = dc.add(qd, dc.mul(qdd, dt))
    return State(dc.add(q, dc.mul(qd_next, dt)), qd_next)


def estimate_state(est: StateEstimator, o):
    o = np.asarray(o, dtype=np.float64)
    if est.net is None:
        if o.shape[-1] < est.n:
            raise dc.ShapeError(f"observation of length {o.shape[-1]} is shorter than n={est.n}")
        return o[..., : est.n]
    return mlp_eval(est.net, o)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def to_checkpoint(model) -> dc.Checkpoint:
    if isinstance(model, LnnModel):
        meta = {"epsilon": model.epsilon, "softplus_diag": model.softplus_diag}
        arrays = {"B": model.B}
        if isinstance(model, ComLnnModel):
            meta.update(n_reduced=model.n_reduced, m_input=model.m_input,
                        reduced_index=list(model.reduced_index))
            arrays = {}
        return dc.Checkpoint(model.kind, model.nets(), meta, arrays)
    if isinstance(model, BnnModel):
        arrays = {k: getattr(model, k) for k in ("in_mean", "in_std", "out_mean", "out_std")}
        return dc.Checkpoint("BNN", model.nets(), {"n": model.n, "m": model.m}, arrays)
    if isinstance(model, StateEstimator):
        return dc.Checkpoint("ESTIMATOR", model.nets(), {"n": model.n})
    if isinstance(model, ValueModel):
        return dc.Checkpoint("VALUE", model.nets(),
                             {"out_mean": model.out_mean, "out_scale": model.out_scale})
    raise TypeError(f"cannot serialize {type(model).__name__}")


def from_checkpoint(ckpt: dc.Checkpoint):
    k, nets, meta, arrays = ckpt.kind, ckpt.nets, ckpt.meta, ckpt.arrays
    if k == "LNN_COM":
        return ComLnnModel(nets["y"], nets["v"], nets["f"], None, meta["epsilon"],
                           softplus_diag=meta["softplus_diag"], n_reduced=meta["n_reduced"],
                           m_input=meta["m_input"], reduced_index=tuple(meta["reduced_index"]))
    if k in LNN_KINDS:
        return LnnModel(nets["y"], nets["v"], nets.get("f"), arrays["B"], meta["epsilon"], k,
                        meta["softplus_diag"])
    if k == "BNN":
        return BnnModel(nets["net"], meta["n"], meta["m"], **arrays)
    if k == "ESTIMATOR":
        return StateEstimator(meta["n"], nets.get("net"))
    if k == "VALUE":
        return ValueModel(nets["net"], meta["out_mean"], meta["out_scale"])
    raise dc.CheckpointError(f"unknown model kind tag {k!r}")


def save_model(path, model) -> None:
    dc.save_checkpoint(path, to_checkpoint(model))


def load_model(path):
    return from_checkpoint(dc.load_checkpoint(path))
