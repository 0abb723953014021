"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only what the two policies need: dense layers, a single-head graph attention
layer, masked softmax, a tanh-squashed Gaussian head and Adam.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .exceptions import ShapeMismatch

CHECKPOINT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_LOG_2PI = math.log(2 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        # never in place: backward closures may hand the same array to several parents
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self._accum(np.array(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape_check(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from e


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: a._accum(g.T))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw)


def scatter(a: Tensor, index, shape, fill: float = 0.0) -> Tensor:
    """Place ``a`` at ``index`` of a new array of ``shape`` filled with ``fill``."""
    out = np.full(shape, fill, dtype=np.float64)
    out[index] = a.data
    return _make(out, (a,), lambda g: a._accum(np.asarray(g)[index]))


def concat(tensors: list, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _make(data, tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def bw(g):
        g = g.copy()
        g[y <= 0] = 0.0
        a._accum(g)

    return _make(y, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: a._accum(g * scale))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: a._accum(g * (1.0 - y * y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: a._accum(g * y))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(y, (a,), lambda g: a._accum(g * sig))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: a._accum(2.0 * g * a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: a._accum(g * inside))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * take_a)
        if b.requires_grad:
            b._accum(g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw)


def masked_softmax(a: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with masked entries forced to exactly zero.

    A slice with no unmasked entry yields all zeros.
    """
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    shifted = np.where(mask, x, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


def masked_log_softmax(a: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Log-softmax; masked entries are -inf and receive no gradient."""
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    shifted = np.where(mask, x, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    lse = top + np.log(np.sum(np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0), axis=axis, keepdims=True))
    y = np.where(mask, x - lse, -np.inf)
    p = np.where(mask, np.exp(np.where(mask, y, 0.0)), 0.0)

    def bw(g):
        g = np.where(mask, g, 0.0)
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), bw)


class ParamStore:
    """Ordered name -> Tensor map holding learnable parameters."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, bias: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.add(f"{prefix}.W", self.rng.uniform(-bound, bound, (fan_in, fan_out)))
        if bias:
            self.add(f"{prefix}.b", self.rng.uniform(-bound, bound, (1, fan_out)))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def copy(self) -> ParamStore:
        out = ParamStore(self.seed)
        for k, t in self.params.items():
            out.add(k, t.data.copy())
        return out

    def load_values(self, other: ParamStore):
        for k, t in other.params.items():
            self.params[k].data = t.data.copy()

    def subset(self, prefix: str) -> ParamStore:
        out = ParamStore(self.seed)
        out.params = {k: t for k, t in self.params.items() if k.startswith(prefix)}
        return out

    def frozen(self) -> dict[str, Tensor]:
        """Views without gradient tracking (used to backprop through a fixed net)."""
        return {k: Tensor(t.data) for k, t in self.params.items()}

    def to_dict(self) -> dict:
        return {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for k, t in self.params.items()}

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> ParamStore:
        out = cls(seed)
        for k, v in d.items():
            out.add(k, np.array(v["values"], dtype=np.float64).reshape(v["shape"]))
        return out


def init_mlp(store: ParamStore, prefix: str, sizes: list[int]):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add_linear(f"{prefix}.{i}", a, b)


def mlp_forward(params, x, prefix: str, activation: str = "relu", out_activation: str | None = None) -> Tensor:
    """Affine layers ``{prefix}.{i}.W/b`` with ``activation`` between them."""
    acts = {"relu": relu, "tanh": tanh, "leaky_relu": leaky_relu, None: lambda t: t}
    h = as_tensor(x)
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no layers under prefix {prefix!r}")
    for i in range(n):
        W = params[f"{prefix}.{i}.W"]
        if h.shape[-1] != W.shape[0]:
            raise ShapeMismatch(f"layer {prefix}.{i} expects {W.shape[0]} inputs, got {h.shape[-1]}")
        h = matmul(h, W)
        if f"{prefix}.{i}.b" in params:
            h = add(h, params[f"{prefix}.{i}.b"])
        h = acts[activation](h) if i < n - 1 else acts[out_activation](h)
    return h


def init_gat_layer(store: ParamStore, prefix: str, obj_dim: int, robot_dim: int, width: int):
    store.add_linear(f"{prefix}.wg", obj_dim, width, bias=False)
    store.add_linear(f"{prefix}.wo", obj_dim, width, bias=False)
    store.add_linear(f"{prefix}.wr", robot_dim, width, bias=False)
    bound = 1.0 / math.sqrt(width)
    store.add(f"{prefix}.a_src", store.rng.uniform(-bound, bound, (width, 1)))
    store.add(f"{prefix}.a_dst", store.rng.uniform(-bound, bound, (width, 1)))


def gat_layer(params, prefix: str, robot_feat, obj_feats, adjacency: np.ndarray,
              attention: str = "learned", membership: np.ndarray | None = None
              ) -> tuple[Tensor, Tensor, np.ndarray]:
    """One graph attention layer over the object nodes with the robot as context.

    Each object embedding is ``relu(wg s_i + wr s_r + sum_j alpha_ij wo s_j)``
    where ``j`` ranges over ``adjacency[i]``. Learned scores are
    ``leaky_relu(a_src . wo s_i + a_dst . wo s_j)`` normalized by softmax over
    the neighbors; ``attention="uniform"`` uses equal weights instead. Returns
    the new robot embedding, the object embeddings and the attention matrix.

    Several graphs can be stacked into one call: ``robot_feat`` then has one
    row per graph, ``membership[i, b]`` marks node ``i`` as part of graph
    ``b`` and ``adjacency`` must be block diagonal.
    """
    robot_feat, obj_feats = as_tensor(robot_feat), as_tensor(obj_feats)
    adjacency = np.asarray(adjacency, dtype=bool)
    m = obj_feats.shape[0]
    if m < 1:
        raise ShapeMismatch("graph attention needs at least one object node")
    if adjacency.shape != (m, m):
        raise ShapeMismatch(f"adjacency {adjacency.shape} for {m} nodes")
    if membership is None and robot_feat.shape[0] != 1:
        raise ShapeMismatch("several robot rows need a membership matrix")
    g = matmul(obj_feats, params[f"{prefix}.wg.W"])
    o = matmul(obj_feats, params[f"{prefix}.wo.W"])
    r = matmul(robot_feat, params[f"{prefix}.wr.W"])
    r_nodes = r if membership is None else matmul(Tensor(membership), r)
    if attention == "learned":
        src = matmul(o, params[f"{prefix}.a_src"])
        dst = matmul(o, params[f"{prefix}.a_dst"])
        scores = leaky_relu(add(src, transpose(dst)), 0.2)
        alpha = masked_softmax(scores, adjacency, axis=1)
    elif attention == "uniform":
        counts = adjacency.sum(axis=1, keepdims=True)
        alpha = Tensor(np.divide(adjacency, counts, out=np.zeros((m, m)), where=counts > 0))
    else:
        raise ValueError(f"unknown attention mode {attention!r}")
    h = add(add(g, r_nodes), matmul(alpha, o))
    return relu(r), relu(h), alpha.data


def squashed_gaussian_sample(mean_t, log_std_t, rng: np.random.Generator | None = None,
                             deterministic: bool = False) -> tuple[Tensor, Tensor]:
    """Reparameterized tanh(N(mean, std)) sample and its exact log density.

    Rows are independent samples; ``log_prob`` has shape (batch, 1).
    """
    mean_t, log_std_t = as_tensor(mean_t), as_tensor(log_std_t)
    log_std_t = clip(log_std_t, LOG_STD_MIN, LOG_STD_MAX)
    if deterministic:
        eps = np.zeros(mean_t.shape)
    else:
        eps = rng.standard_normal(mean_t.shape)
    u = add(mean_t, mul(exp(log_std_t), eps))
    action = clip(tanh(u), -1.0 + 1e-12, 1.0 - 1e-12)
    gauss = -0.5 * (eps * eps).sum(axis=-1, keepdims=True) - 0.5 * _LOG_2PI * eps.shape[-1]
    logp = sub(gauss, tsum(log_std_t, axis=-1, keepdims=True))
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    jac = mul(sub(sub(math.log(2.0), u), softplus(mul(u, -2.0))), 2.0)
    logp = sub(logp, tsum(jac, axis=-1, keepdims=True))
    return action, logp


def squashed_gaussian_log_prob(action: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Density of a squashed Gaussian at given actions (no graph; for checks)."""
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    u = np.arctanh(action)
    z = (u - mean) / np.exp(log_std)
    base = -0.5 * z * z - log_std - 0.5 * _LOG_2PI
    return (base - np.log1p(-action * action)).sum(axis=-1)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; ``state`` holds the moment estimates."""
    out = {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = state.setdefault(("m", k), np.zeros_like(p))
        v = state.setdefault(("v", k), np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        step = m / denom
        step *= lr / c1
        out[k] = p - step
    return out


class Adam:
    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.state: dict = {}

    def step(self):
        self.t += 1
        grads = self.store.grads()
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.max_grad_norm:
                grads = {k: g * (self.max_grad_norm / norm) for k, g in grads.items()}
        values = {k: t.data for k, t in self.store.items()}
        new = adam_step(values, grads, self.state, self.lr, self.t, self.beta1, self.beta2, self.eps)
        for k, t in self.store.items():
            t.data = new[k]
        self.store.zero_grad()


def save_checkpoint(path, stores: dict[str, ParamStore], hyperparams: dict, seed: int, **extra) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "hyperparams": hyperparams,
        "params": {},
    }
    for group, store in stores.items():
        for name, v in store.to_dict().items():
            doc["params"][f"{group}/{name}"] = v
    doc.update(extra)
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[dict[str, ParamStore], dict, int, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    grouped: dict[str, dict] = {}
    for key, v in doc["params"].items():
        group, name = key.split("/", 1)
        grouped.setdefault(group, {})[name] = v
    stores = {g: ParamStore.from_dict(d, doc["seed"]) for g, d in grouped.items()}
    extra = {k: v for k, v in doc.items() if k not in ("version", "seed", "hyperparams", "params")}
    return stores, doc["hyperparams"], doc["seed"], extra
