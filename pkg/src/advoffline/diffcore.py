"""Reverse-mode differentiation over numpy arrays and a small MLP engine.

The tape is rebuilt on every forward pass: each operation returns a new
``Tensor`` that remembers its parents and a closure mapping the output
gradient to parent gradients. ``grad`` walks the graph once in reverse
topological order. Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "none")


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, True, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x, w, b):
    """x @ w + b with a single tape node."""
    x = as_tensor(x)

    def backward(g):
        gx = g @ w.value.T if x.requires_grad else None
        gw = x.value.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(x.value @ w.value + b.value, (x, w, b), backward)


def relu(x):
    x = as_tensor(x)
    # subgradient at 0 is 0
    return _node(np.maximum(x.value, 0.0), (x,), lambda g: (g * (x.value > 0.0),))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def square(x):
    x = as_tensor(x)
    return _node(x.value * x.value, (x,), lambda g: (2.0 * x.value * g,))


def sum(x, axis=None):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.value.sum(axis=axis), (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def concat(xs: Sequence, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.value.size != 1:
        raise ValueError(f"gradient needs a scalar objective, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(_topo(output)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(t), np.zeros_like(t.value)) for t in wrt]


# ---------------------------------------------------------------- networks

class MlpNet:
    """Feedforward net: linear layers with ReLU between them.

    ``output_activation`` is ``"tanh"`` for a bounded actor, ``"none"`` for a
    critic. Weights are stored as (fan_in, fan_out).
    """

    def __init__(self, layer_dims, output_activation="none", rng=None, params=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"bad layer_dims {layer_dims}")
        if output_activation not in ("tanh", "none"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_dims = layer_dims
        self.output_activation = output_activation
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = []
            for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, fan_out))
        self.params = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
        for (w, b), fan_in, fan_out in zip(self.layers, layer_dims[:-1], layer_dims[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("parameter shapes do not chain with layer_dims")

    @property
    def layers(self):
        return list(zip(self.params[0::2], self.params[1::2]))

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def activations(self):
        return ["relu"] * (len(self.layer_dims) - 2) + [self.output_activation]

    def _check(self, x):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != net input dim {self.input_dim}")

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        self._check(x.value)
        layers = self.layers
        h = x
        for i, (w, b) in enumerate(layers):
            h = linear(h, w, b)
            if i < len(layers) - 1:
                h = relu(h)
        return tanh(h) if self.output_activation == "tanh" else h

    def predict(self, x) -> np.ndarray:
        """Tape-free forward pass."""
        h = np.asarray(x, dtype=np.float64)
        self._check(h)
        layers = self.layers
        for i, (w, b) in enumerate(layers):
            h = h @ w.value + b.value
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return np.tanh(h) if self.output_activation == "tanh" else h

    def copy(self) -> "MlpNet":
        return MlpNet(self.layer_dims, self.output_activation,
                      params=[p.value.copy() for p in self.params])

    def load_from(self, other: "MlpNet"):
        for p, q in zip(self.params, other.params):
            p.value[...] = q.value

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params])


def forward(net: MlpNet, x) -> Tensor:
    out = net(x)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite network output")
    return out


def grad_params(net: MlpNet, loss_fn: Callable[[MlpNet], Tensor]) -> list[np.ndarray]:
    return grad(loss_fn(net), net.params)


def grad_input(net: MlpNet, x, objective: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Gradient of ``objective(net(x))`` with respect to ``x``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    (g,) = grad(objective(net(xt)), [xt])
    return g


class frozen:
    """Context manager: treat the nets' parameters as constants while building a tape."""

    def __init__(self, *nets):
        self.params = [p for net in nets if net is not None for p in net.params]

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag
        return False


def soft_update(target: MlpNet, live: MlpNet, tau: float):
    for t, p in zip(target.params, live.params):
        t.value *= 1.0 - tau
        t.value += tau * p.value


# --------------------------------------------------------------- optimizer

@dataclass
class MomentOptimizer:
    """Adam with bias correction."""

    shapes: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.shapes = [tuple(s) for s in self.shapes]
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_net(cls, net: MlpNet, **kw) -> "MomentOptimizer":
        return cls([p.shape for p in net.params], **kw)

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]):
        if len(params) != len(self.shapes) or len(grads) != len(self.shapes):
            raise ValueError("parameter count mismatch")
        for p, g, s in zip(params, grads, self.shapes):
            if p.shape != s or np.shape(g) != s:
                raise ValueError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, expected {s}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optimizer_step(opt: MomentOptimizer, params, grads):
    return opt.step(params, grads)


# -------------------------------------------------------------- checkpoint

def save_net(net: MlpNet, stem, role: str) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (little-endian float64, W1,b1,W2,b2,...) and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    flat = net.flat().astype("<f8")
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(flat.tobytes())
    manifest = {
        "layer_dims": net.layer_dims,
        "activations": net.activations,
        "float_count": int(flat.size),
        "role": role,
        "format_version": FORMAT_VERSION,
    }
    json_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bin_path, json_path


def load_net(stem) -> tuple[MlpNet, dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["float_count"]:
        raise ValueError(f"{stem}: expected {manifest['float_count']} floats, found {flat.size}")
    dims = manifest["layer_dims"]
    params, i = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params.append(flat[i:i + fan_in * fan_out].reshape(fan_in, fan_out))
        i += fan_in * fan_out
        params.append(flat[i:i + fan_out])
        i += fan_out
    net = MlpNet(dims, manifest["activations"][-1], params=params)
    return net, manifest
