"""Datasets from the analytic simulators, supervised losses, and training loops."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diff_core as dc
from . import mechanics
from . import models as md
from .mechanics import State, SystemSpec
from .models import BnnModel, ComLnnModel, LnnModel, ValueModel

log = logging.getLogger(__name__)

FIELDS = ("q", "qd", "u", "qdd", "q_next", "qd_next")

# (q range, qd range) of the uniform initial-state distribution, per coordinate
INIT_RANGES = {
    "Pendulum": ([np.pi], [3.0]),
    "DoublePendulum": ([np.pi / 2, np.pi / 2], [1.0, 1.0]),
    "CartPole": ([1.0, np.pi], [1.0, 2.0]),
    "PlanarTorso": ([1.0, 1.0, 0.5], [1.0, 1.0, 1.0]),
}

MAX_SINUSOIDS = 5
FREQ_RANGE_HZ = (0.1, 2.0)


class TrainingDivergence(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass
class TransitionDataset:
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    qdd: np.ndarray
    q_next: np.ndarray
    qd_next: np.ndarray
    dt: float
    kind: str
    steps_per_traj: int
    stats: dict | None = None

    def __post_init__(self):
        counts = {len(getattr(self, f)) for f in FIELDS}
        if len(counts) != 1:
            raise dc.ShapeError(f"dataset fields disagree on record count: {counts}")

    @property
    def count(self) -> int:
        return len(self.q)

    def __len__(self):
        return self.count

    @property
    def n_traj(self) -> int:
        return self.count // self.steps_per_traj if self.steps_per_traj else 0

    @property
    def traj_id(self) -> np.ndarray:
        return np.arange(self.count) // self.steps_per_traj

    def take(self, idx) -> "TransitionDataset":
        idx = np.asarray(idx)
        return replace(self, **{f: getattr(self, f)[idx] for f in FIELDS})

    def first_trajectories(self, k: int) -> "TransitionDataset":
        return self.take(np.arange(min(k, self.n_traj) * self.steps_per_traj))

    def state(self) -> State:
        return State(self.q, self.qd)


def excitation(rng: np.random.Generator, m: int, u_max: float, times: np.ndarray) -> np.ndarray:
    """Band-limited random input: up to five sinusoids per channel, |u| <= u_max."""
    K = int(rng.integers(1, MAX_SINUSOIDS + 1))
    freqs = rng.uniform(*FREQ_RANGE_HZ, size=(K, m))
    phases = rng.uniform(0.0, 2 * np.pi, size=(K, m))
    amps = rng.dirichlet(np.ones(K), size=m).T * u_max * rng.uniform(0.3, 1.0, size=m)
    arg = 2 * np.pi * freqs[None] * times[:, None, None] + phases[None]
    return np.sum(amps[None] * np.sin(arg), axis=1)


def generate_dataset(spec: SystemSpec, n_trajectories: int, steps_per_traj: int, dt: float,
                     seed: int) -> TransitionDataset:
    if n_trajectories < 1 or steps_per_traj < 1:
        raise ValueError("trajectory count and length must be positive")
    if not dt > 0:
        raise mechanics.MechanicsError(f"time step must be positive, got {dt}")
    n, m = spec.n, spec.m
    q_hi, qd_hi = (np.asarray(r, float) for r in INIT_RANGES[spec.kind])
    times = np.arange(steps_per_traj) * dt
    q = np.empty((n_trajectories, n))
    qd = np.empty((n_trajectories, n))
    U = np.empty((n_trajectories, steps_per_traj, m))
    # one stream per trajectory, so trajectories can be generated independently
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_trajectories)):
        rng = np.random.default_rng(child)
        q[i] = rng.uniform(-q_hi, q_hi)
        qd[i] = rng.uniform(-qd_hi, qd_hi)
        U[i] = excitation(rng, m, spec.u_max, times)

    shape = (n_trajectories, steps_per_traj)
    rec = {f: np.empty(shape + (m if f == "u" else n,)) for f in FIELDS}
    for k in range(steps_per_traj):
        u = U[:, k]
        qdd = mechanics.forward_dynamics_gt(spec, q, qd, u)
        nxt = mechanics.semi_implicit(q, qd, qdd, dt)
        for f, v in zip(FIELDS, (q, qd, u, qdd, nxt.q, nxt.qd)):
            rec[f][:, k] = v
        q, qd = nxt
    flat = {f: v.reshape(-1, v.shape[-1]) for f, v in rec.items()}
    return TransitionDataset(**flat, dt=dt, kind=spec.kind, steps_per_traj=steps_per_traj)


def normalize(dataset: TransitionDataset):
    """Per-field, per-dimension standardization. Zero-variance columns keep std 1."""
    stats = {}
    out = {}
    for f in FIELDS:
        x = getattr(dataset, f)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        stats[f] = (mu, sd)
        out[f] = (x - mu) / sd
    return replace(dataset, **out, stats=stats), stats


def denormalize(x, stats, name: str):
    mu, sd = stats[name]
    return np.asarray(x) * sd + mu


_HDR = "<4sI"


def dataset_to_bytes(ds: TransitionDataset) -> bytes:
    buf = io.BytesIO()
    kind = ds.kind.encode()
    n, m = ds.q.shape[1], ds.u.shape[1]
    buf.write(struct.pack(_HDR, b"LDS1", 1))
    buf.write(struct.pack("<I", len(kind)) + kind)
    buf.write(struct.pack("<IIdQI", n, m, ds.dt, ds.count, ds.steps_per_traj))
    packed = np.concatenate([getattr(ds, f) for f in FIELDS], axis=1)
    buf.write(packed.astype("<f8").tobytes())
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> TransitionDataset:
    magic, version = struct.unpack_from(_HDR, data, 0)
    if magic != b"LDS1" or version != 1:
        raise ValueError("not a version-1 LDS1 dataset file")
    off = struct.calcsize(_HDR)
    (klen,) = struct.unpack_from("<I", data, off)
    kind = data[off + 4: off + 4 + klen].decode()
    off += 4 + klen
    n, m, dt, count, spt = struct.unpack_from("<IIdQI", data, off)
    off += struct.calcsize("<IIdQI")
    width = 5 * n + m
    packed = np.frombuffer(data, dtype="<f8", count=count * width, offset=off).astype(float)
    packed = packed.reshape(count, width)
    cols = np.cumsum([0, n, n, m, n, n, n])
    rec = {f: packed[:, cols[i]:cols[i + 1]].copy() for i, f in enumerate(FIELDS)}
    return TransitionDataset(**rec, dt=dt, kind=kind, steps_per_traj=spt)


def save_dataset(path, ds: TransitionDataset) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(ds))


def load_dataset(path) -> TransitionDataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def reduce_batch(batch: TransitionDataset, reduced_index: Sequence[int]) -> TransitionDataset:
    """Keep only the reduced coordinates (and their rates) of every state field."""
    idx = list(reduced_index)
    return replace(batch, **{f: getattr(batch, f)[:, idx] for f in FIELDS if f != "u"})


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _mse(pred_parts, target_parts):
    err = dc.concat([dc.sub(p, t) for p, t in zip(pred_parts, target_parts)], axis=-1)
    return dc.mean(dc.mul(err, err))


def loss_fd_next_state(model, batch: TransitionDataset, params=None):
    nxt = md.predict_next(model, State(batch.q, batch.qd), batch.u, batch.dt, params)
    return _mse(nxt, (batch.q_next, batch.qd_next))


def loss_id_torque(model: LnnModel, batch: TransitionDataset, params=None):
    tau = md.inverse_dynamics_lnn(model, batch.q, batch.qd, batch.qdd, params)
    return _mse([tau], [batch.u @ model.B.T])


def loss_com(model: ComLnnModel, batch: TransitionDataset, params=None):
    if batch.q.shape[-1] != model.n:
        raise dc.ShapeError(
            f"reduced batch has {batch.q.shape[-1]} coordinates, model expects {model.n}; "
            "project with reduce_batch first"
        )
    return loss_fd_next_state(model, batch, params)


LOSS_FOR_KIND = {"BNN": "next_state", "LNN_FD": "next_state", "LNN_DIAG": "next_state",
                 "LNN_ID": "torque", "LNN_COM": "com_next_state"}


def loss_value(model, batch, loss_kind: str, params=None):
    if loss_kind == "torque":
        return loss_id_torque(model, batch, params)
    if loss_kind == "com_next_state":
        return loss_com(model, batch, params)
    return loss_fd_next_state(model, batch, params)


def next_state_mse(model, batch: TransitionDataset) -> float:
    """Validation metric shared by every model kind (reduced space for CoM)."""
    if isinstance(model, ComLnnModel) and batch.q.shape[-1] != model.n:
        batch = reduce_batch(batch, model.reduced_index)
    return float(loss_fd_next_state(model, batch))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    model_kind: str = "LNN_FD"
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: tuple[int, ...] = (64, 64)
    epsilon: float = 1e-6
    loss_kind: str | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.model_kind not in md.MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {md.MODEL_KINDS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.loss_kind is None:
            self.loss_kind = LOSS_FOR_KIND[self.model_kind]
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class LossCurve:
    epoch: list[int] = field(default_factory=list)
    samples_seen: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def append(self, epoch, seen, train, val):
        if self.samples_seen and seen <= self.samples_seen[-1]:
            raise ValueError("samples_seen must strictly increase")
        self.epoch.append(epoch)
        self.samples_seen.append(seen)
        self.train_loss.append(train)
        self.val_loss.append(val)

    def __len__(self):
        return len(self.epoch)

    def normalized(self) -> "LossCurve":
        """Both loss columns divided by their first value."""
        out = LossCurve(list(self.epoch), list(self.samples_seen))
        if self.epoch:
            t0, v0 = self.train_loss[0], self.val_loss[0]
            out.train_loss = [x / t0 for x in self.train_loss]
            out.val_loss = [x / v0 for x in self.val_loss]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "samples_seen", "train_loss", "val_loss"])
        for row in zip(self.epoch, self.samples_seen, self.train_loss, self.val_loss):
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
        return buf.getvalue()


def split_by_trajectory(dataset: TransitionDataset, val_fraction: float, seed: int):
    """Return (train_idx, val_idx); whole trajectories go to one side only."""
    n_traj = dataset.n_traj
    order = np.random.default_rng([seed, 1]).permutation(n_traj)
    n_val = 0 if n_traj < 2 else max(1, int(round(val_fraction * n_traj)))
    val_traj = np.sort(order[:n_val])
    is_val = np.isin(dataset.traj_id, val_traj)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def _prepare_bnn(model: BnnModel, train: TransitionDataset) -> BnnModel:
    x = np.concatenate([train.q, train.qd, train.u], axis=1)
    y = np.concatenate([train.q_next, train.qd_next], axis=1)
    sd = lambda a: np.where(a.std(0) > 0, a.std(0), 1.0)  # noqa: E731
    return replace(model, in_mean=x.mean(0), in_std=sd(x), out_mean=y.mean(0), out_std=sd(y))


def train_model(dataset: TransitionDataset, config: TrainConfig, spec: SystemSpec | None = None,
                model=None):
    """Mini-batch Adam on the loss matching ``config.model_kind``.

    Returns ``(model, LossCurve)``. The validation split is by trajectory.
    """
    if dataset.count == 0:
        raise ValueError("empty dataset")
    spec = spec or SystemSpec(dataset.kind)
    if model is None:
        model = md.init_model(config.model_kind, spec, config.hidden, config.seed, config.epsilon)
    train_idx, val_idx = split_by_trajectory(dataset, config.val_fraction, config.seed)
    train, val = dataset.take(train_idx), dataset.take(val_idx)
    if isinstance(model, ComLnnModel):
        train, val = reduce_batch(train, model.reduced_index), reduce_batch(val, model.reduced_index)
    if isinstance(model, BnnModel):
        model = _prepare_bnn(model, train)

    curve = LossCurve()
    if config.epochs == 0:
        return model, curve
    names = list(model.nets())
    flat = {k: net.params.copy() for k, net in model.nets().items()}
    opt = {k: dc.AdamState.zeros(v.size, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
           for k, v in flat.items()}
    rng = np.random.default_rng([config.seed, 2])
    seen = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(train.count)
        total = 0.0
        for step, start in enumerate(range(0, train.count, config.batch_size)):
            batch = train.take(perm[start:start + config.batch_size])
            current = model.with_params(flat)

            def loss_fn(*pv):
                return loss_value(current, batch, config.loss_kind, dict(zip(names, pv)))

            loss, grads = dc.grad_params(loss_fn, [current.nets()[k] for k in names])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergence(
                    f"non-finite loss or gradient at epoch {epoch}, step {step} "
                    f"(loss={loss}, model={config.model_kind}, lr={config.lr})"
                )
            for k, g in zip(names, grads):
                flat[k], opt[k] = dc.adam_step(flat[k], g, opt[k])
            total += loss * batch.count
        seen += train.count
        model = model.with_params(flat)
        val_loss = float(loss_value(model, val, config.loss_kind)) if val.count else float("nan")
        curve.append(epoch, seen, total / train.count, val_loss)
        log.debug("epoch %d train %.3e val %.3e", epoch, total / train.count, val_loss)
    return model, curve


# --------------------------------------------------------------------------
# Generic regression (value function, state estimator)
# --------------------------------------------------------------------------


def fit_regression(net: dc.Mlp, X: np.ndarray, Y: np.ndarray, config: TrainConfig,
                   val_idx: np.ndarray | None = None):
    """Least-squares fit of ``net`` to (X, Y). Returns (net, held-out MSE)."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float).reshape(len(X), -1)
    rng = np.random.default_rng([config.seed, 3])
    if val_idx is None:
        perm = rng.permutation(len(X))
        val_idx = perm[: max(1, int(round(config.val_fraction * len(X))))] if len(X) > 1 else perm[:0]
    mask = np.zeros(len(X), bool)
    mask[val_idx] = True
    Xt, Yt, Xv, Yv = X[~mask], Y[~mask], X[mask], Y[mask]
    params = net.params.copy()
    state = dc.AdamState.zeros(params.size, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    for epoch in range(config.epochs):
        perm = rng.permutation(len(Xt))
        for start in range(0, len(Xt), config.batch_size):
            b = perm[start:start + config.batch_size]

            def loss_fn(p):
                err = dc.sub(dc.mlp_eval(net, Xt[b], params=p), Yt[b])
                return dc.mean(dc.mul(err, err))

            loss, (g,) = dc.grad_params(loss_fn, [dc.Mlp(net.layer_sizes, params, net.activation)])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite regression loss at epoch {epoch + 1}")
            params, state = dc.adam_step(params, g, state)
    fitted = dc.Mlp(net.layer_sizes, params, net.activation)
    heldout = float(np.mean((dc.mlp_eval(fitted, Xv) - Yv) ** 2)) if len(Xv) else float("nan")
    return fitted, heldout


def discounted_returns(rewards: np.ndarray, gamma: float, steps_per_traj: int) -> np.ndarray:
    """Monte-Carlo return from every record to the end of its trajectory."""
    r = np.asarray(rewards, float).reshape(-1, steps_per_traj)
    out = np.zeros_like(r)
    acc = np.zeros(r.shape[0])
    for k in range(steps_per_traj - 1, -1, -1):
        acc = r[:, k] + gamma * acc
        out[:, k] = acc
    return out.reshape(-1)


def fit_value(states: State, returns: np.ndarray, config: TrainConfig) -> ValueModel:
    """Regress discounted returns on the full state. Targets are standardized
    internally; the held-out MSE (in return units) is stored on the model."""
    q, qd = states
    X = np.concatenate([q, qd], axis=-1)
    y = np.asarray(returns, float)
    mu, sd = float(y.mean()), float(y.std())
    sd = sd if sd > 0 else 1.0
    net = dc.mlp_init([X.shape[1]] + list(config.hidden) + [1], config.seed)
    # zero output layer: the untrained value is the mean return
    W_out, b_out = net.layers()[-1]
    W_out[:] = 0.0
    net, heldout = fit_regression(net, X, (y - mu) / sd, config)
    return ValueModel(net, out_mean=mu, out_scale=sd, heldout_mse=heldout * sd * sd)


def fit_estimator(obs: np.ndarray, q: np.ndarray, config: TrainConfig) -> md.StateEstimator:
    obs = np.asarray(obs, float)
    q = np.asarray(q, float)
    net = dc.mlp_init([obs.shape[1]] + list(config.hidden) + [q.shape[1]], config.seed)
    net, heldout = fit_regression(net, obs, q, config)
    est = md.StateEstimator(q.shape[1], net)
    est.heldout_mse = heldout
    return est
