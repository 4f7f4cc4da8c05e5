"""Small reverse-mode autodiff over numpy arrays, plus MLPs with input Jacobians.

Every op accepts plain arrays or :class:`Var` nodes. When no input is a
``Var`` the op is a straight numpy call, so inference code and training
code share one implementation. Input Jacobians are propagated forward
through the network *using these same ops*, which means a reverse pass
over a loss that touches Jacobian entries picks up the second-order terms
without any special casing.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DiffCoreError(Exception):
    pass


class InvalidArchitectureError(DiffCoreError, ValueError):
    pass


class ShapeError(DiffCoreError, ValueError):
    pass


class UnsupportedOpError(DiffCoreError, TypeError):
    pass


class CheckpointError(DiffCoreError, ValueError):
    pass


# --------------------------------------------------------------------------
# Graph nodes
# --------------------------------------------------------------------------


class Var:
    """A recorded value. ``parents`` holds ``(node, vjp)`` pairs."""

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOpError(
            "a recorded Var was passed to a raw numpy routine; use diff_core ops"
        )

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        op = _UFUNC_OPS.get(ufunc)
        if op is None or method != "__call__" or kwargs:
            raise UnsupportedOpError(f"no differentiable rule for numpy.{ufunc.__name__}")
        return op(*inputs)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def param(value) -> Var:
    """Leaf node to differentiate with respect to."""
    return Var(np.array(value, dtype=np.float64))


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _recorded(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(v, *links):
    """Build a Var from (input, vjp) links, dropping non-recorded inputs."""
    return Var(v, tuple((x, f) for x, f in links if isinstance(x, Var)))


# --------------------------------------------------------------------------
# Elementwise ops
# --------------------------------------------------------------------------


def add(a, b):
    if not _recorded(a, b):
        return np.add(a, b)
    av, bv = value(a), value(b)
    return _node(av + bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    if not _recorded(a, b):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    return _node(av - bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    if not _recorded(a, b):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    return _node(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    if not _recorded(a, b):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    return _node(out,
                 (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return _node(-a.value, (a, lambda g: -g))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _node(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a):
    if not isinstance(a, Var):
        return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a)))
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a):
    if not isinstance(a, Var):
        return np.logaddexp(0.0, a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(np.logaddexp(0.0, a.value), (a, lambda g: g * s))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return _node(out, (a, lambda g: g * out))


def relu(a):
    # First-order only: its derivative is a step and cannot itself be differentiated.
    if not isinstance(a, Var):
        return np.maximum(a, 0.0)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


# --------------------------------------------------------------------------
# Linear algebra and shape ops
# --------------------------------------------------------------------------


def matmul(a, b):
    if not _recorded(a, b):
        return np.matmul(a, b)
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("recorded matmul needs operands with ndim >= 2")
    return _node(av @ bv,
                 (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
                 (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def einsum(subscripts: str, a, b):
    """Two-operand einsum. Every index of an operand must also appear in the
    other operand or in the output (no silent reductions over a lone index)."""
    if not _recorded(a, b):
        return np.einsum(subscripts, a, b)
    av, bv = value(a), value(b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s.replace("...", ""):
            if ch not in other and ch not in out:
                raise UnsupportedOpError(f"einsum index {ch!r} is summed within one operand")
    # keep broadcast dims in the cotangent, then fold them back onto the operand
    ga = sa if "..." in sa or "..." not in out else "..." + sa
    gb = sb if "..." in sb or "..." not in out else "..." + sb
    return _node(np.einsum(subscripts, av, bv),
                 (a, lambda g: _unbroadcast(np.einsum(f"{out},{sb}->{ga}", g, bv), av.shape)),
                 (b, lambda g: _unbroadcast(np.einsum(f"{out},{sa}->{gb}", g, av), bv.shape)))


def solve(A, b):
    """Batched linear solve ``A x = b`` with ``b`` of shape (..., n)."""
    Av, bv = value(A), value(b)
    x = np.linalg.solve(Av, bv[..., None])[..., 0]
    if not _recorded(A, b):
        return x

    def grad_b(g):
        return np.linalg.solve(np.swapaxes(Av, -1, -2), g[..., None])[..., 0]

    def grad_A(g):
        gb = grad_b(g)
        return _unbroadcast(-gb[..., :, None] * x[..., None, :], Av.shape)

    return _node(x, (A, grad_A), (b, lambda g: _unbroadcast(grad_b(g), bv.shape)))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None):
    n = value(a).size if axis is None else value(a).shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def swapaxes(a, i, j):
    if not isinstance(a, Var):
        return np.swapaxes(a, i, j)
    return _node(np.swapaxes(a.value, i, j), (a, lambda g: np.swapaxes(g, i, j)))


def getitem(a, idx):
    if not isinstance(a, Var):
        return np.asarray(a)[idx]
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _node(a.value[idx], (a, vjp))


def concat(xs: Sequence, axis: int = -1):
    if not _recorded(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [value(x) for x in xs]
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]
    links = []
    for i, (x, v) in enumerate(zip(xs, vals)):
        def vjp(g, i=i):
            return np.split(g, edges, axis=axis)[i]
        links.append((x, vjp))
    return _node(np.concatenate(vals, axis=axis), *links)


def stop_gradient(a) -> np.ndarray:
    return value(a).copy()


_UFUNC_OPS = {
    np.add: add, np.subtract: sub, np.multiply: mul, np.true_divide: div,
    np.negative: neg, np.matmul: matmul, np.tanh: tanh, np.exp: exp,
}


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------


def grad(out: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
    """Gradients of ``sum(seed * out)`` with respect to each node in ``wrt``."""
    if not isinstance(out, Var):
        return [np.zeros_like(w.value) for w in wrt]
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    keep = {id(w) for w in wrt}
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, float)}
    for node in reversed(order):
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            k = id(parent)
            grads[k] = grads[k] + contrib if k in grads else contrib
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "softplus", "relu")


@dataclass
class Mlp:
    """Feed-forward net with a flat, layer-major parameter vector.

    Per layer the weight matrix (out x in, row-major) comes before the bias.
    The last layer is affine.
    """

    layer_sizes: tuple[int, ...]
    params: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        _check_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise InvalidArchitectureError(f"unknown activation {self.activation!r}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_sizes),):
            raise ShapeError(
                f"expected {n_params(self.layer_sizes)} parameters, got {self.params.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def layers(self, params=None):
        """(W, b) per layer, as views of ``params`` (array or Var)."""
        p = self.params if params is None else params
        out, off = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            nw = fan_in * fan_out
            W = reshape(getitem(p, slice(off, off + nw)), (fan_out, fan_in))
            b = getitem(p, slice(off + nw, off + nw + fan_out))
            out.append((W, b))
            off += nw + fan_out
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.params.copy(), self.activation)


def _check_sizes(sizes):
    if len(sizes) < 2:
        raise InvalidArchitectureError(f"need at least input and output sizes, got {list(sizes)}")
    if any(s < 1 for s in sizes):
        raise InvalidArchitectureError(f"layer sizes must be >= 1, got {list(sizes)}")


def n_params(layer_sizes: Sequence[int]) -> int:
    return int(np.sum([a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]))


def mlp_init(layer_sizes: Sequence[int], seed: int, activation: str = "tanh") -> Mlp:
    sizes = tuple(int(s) for s in layer_sizes)
    _check_sizes(sizes)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Mlp(sizes, np.concatenate(chunks), activation)


def _act(name, z):
    if name == "tanh":
        return tanh(z)
    if name == "softplus":
        return softplus(z)
    return relu(z)


def _act_slope(name, z, h):
    """d act / dz given pre-activation z and activation h."""
    if name == "tanh":
        return sub(1.0, mul(h, h))
    if name == "softplus":
        return sigmoid(z)
    if isinstance(z, Var):
        raise UnsupportedOpError("relu slope is a step function and has no derivative")
    return (np.asarray(z) > 0).astype(np.float64)


def _check_input(mlp: Mlp, x):
    if value(x).shape[-1:] != (mlp.n_in,):
        raise ShapeError(f"input has shape {value(x).shape}, net expects (..., {mlp.n_in})")


def mlp_eval(mlp: Mlp, x, params=None):
    _check_input(mlp, x)
    squeeze = value(x).ndim == 1
    h = reshape(x, (1, mlp.n_in)) if squeeze else x
    layers = mlp.layers(params)
    for i, (W, b) in enumerate(layers):
        z = add(matmul(h, swapaxes(W, 0, 1)), b)
        h = z if i == len(layers) - 1 else _act(mlp.activation, z)
    return reshape(h, (mlp.n_out,)) if squeeze else h


def mlp_eval_jacobian(mlp: Mlp, x, params=None, tangents=None):
    """Evaluate the net and its input Jacobian by forward tangent propagation.

    Returns ``(y, J)`` with ``J[..., i, j] = dy_i / dx_j``. With ``tangents``
    of shape (..., k, n_in) the result is instead ``J @ tangents^T``, i.e.
    ``J[..., i, t]`` is the derivative of ``y_i`` along tangent ``t``.
    """
    _check_input(mlp, x)
    xv = value(x)
    if tangents is None:
        T = np.broadcast_to(np.eye(mlp.n_in), xv.shape[:-1] + (mlp.n_in, mlp.n_in))
    else:
        T = tangents
    h = x if xv.ndim > 1 else reshape(x, (1, mlp.n_in))
    squeeze = xv.ndim == 1
    if squeeze and value(T).ndim == 2:
        T = reshape(T, (1,) + value(T).shape)
    layers = mlp.layers(params)
    for i, (W, b) in enumerate(layers):
        Wt = swapaxes(W, 0, 1)
        z = add(matmul(h, Wt), b)
        Tz = matmul(T, Wt)
        if i == len(layers) - 1:
            h, T = z, Tz
        else:
            h = _act(mlp.activation, z)
            slope = _act_slope(mlp.activation, z, h)
            T = mul(reshape(slope, value(slope).shape[:-1] + (1, value(slope).shape[-1])), Tz)
    J = swapaxes(T, -1, -2)
    if squeeze:
        h = reshape(h, (mlp.n_out,))
        J = reshape(J, value(J).shape[1:])
    return h, J


def grad_params(loss_fn: Callable, mlps: Sequence[Mlp]):
    """Record ``loss_fn(*param_vars)`` and return ``(loss, [dloss/dparams])``.

    ``loss_fn`` receives one parameter node per net, in order, and must
    return a scalar built from diff_core ops.
    """
    pvars = [param(m.params) for m in mlps]
    loss = loss_fn(*pvars)
    if value(loss).shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {value(loss).shape}")
    return float(value(loss)), grad(loss, pvars)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_step(params: np.ndarray, grad_vec: np.ndarray, state: AdamState):
    if params.shape != grad_vec.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"params {params.shape}, grad {grad_vec.shape}, state {state.m.shape} disagree"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad_vec
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad_vec * grad_vec
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


# --------------------------------------------------------------------------
# Checkpoint format
# --------------------------------------------------------------------------
#
#   b"LNN1" | u32 version | str kind | str meta-json | u32 n_nets
#   per net:   str name | str activation | u32 n_layers | u32 sizes... |
#              u64 n_params | f64 params...
#   u32 n_arrays
#   per array: str name | u32 ndim | u32 dims... | f64 data...
#
# All integers and floats little-endian; str = u32 byte length + utf-8.

MAGIC = b"LNN1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    nets: dict[str, Mlp]
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _wstr(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _rstr(buf) -> str:
    (n,) = struct.unpack("<I", _read(buf, 4))
    return _read(buf, n).decode("utf-8")


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _wstr(buf, ckpt.kind)
    _wstr(buf, json.dumps(ckpt.meta, sort_keys=True))
    buf.write(struct.pack("<I", len(ckpt.nets)))
    for name, net in ckpt.nets.items():
        _wstr(buf, name)
        _wstr(buf, net.activation)
        buf.write(struct.pack("<I", len(net.layer_sizes)))
        buf.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
        buf.write(struct.pack("<Q", net.params.size))
        buf.write(net.params.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        _wstr(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = _rstr(buf)
    meta = json.loads(_rstr(buf))
    nets = {}
    (n_nets,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(n_nets):
        name = _rstr(buf)
        act = _rstr(buf)
        (nl,) = struct.unpack("<I", _read(buf, 4))
        sizes = struct.unpack(f"<{nl}I", _read(buf, 4 * nl))
        (npar,) = struct.unpack("<Q", _read(buf, 8))
        params = np.frombuffer(_read(buf, 8 * npar), dtype="<f8").astype(np.float64)
        nets[name] = Mlp(sizes, params, act)
    arrays = {}
    (n_arr,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(n_arr):
        name = _rstr(buf)
        (nd,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{nd}I", _read(buf, 4 * nd))
        count = int(np.prod(shape)) if nd else 1
        arrays[name] = np.frombuffer(_read(buf, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(kind, nets, meta, arrays)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
