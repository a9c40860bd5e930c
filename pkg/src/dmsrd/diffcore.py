"""Small reverse-mode autodiff core for the MLPs used across the package.

Values are float64 numpy arrays. A ``Tensor`` records the operation that
produced it; ``Tensor.backward`` walks the tape in reverse topological
order. Only the operations the package's losses need are provided.

Networks are plain ``ParamSet`` dicts evaluated either through the fast
numpy path (``forward``) or the taped path (``forward_t``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, NumericalError

DTYPE = np.float64


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        if self.value.size != 1:
            raise ContractError("backward() needs a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(astensor(other)))

    def __rsub__(self, other):
        return add(astensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = astensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(astensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(astensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = astensor(a), astensor(b)
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = astensor(a), astensor(b)
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape),
                             _unbroadcast(g * a.value, b.shape)))


def power(a, exponent):
    a = astensor(a)
    p = float(exponent)
    return Tensor(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1.0),))


def matmul(a, b):
    a, b = astensor(a), astensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if b.value.ndim > 1 else np.outer(g, b.value)
        gb = np.swapaxes(a.value, -1, -2) @ g if a.value.ndim > 1 else np.outer(a.value, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.value @ b.value, (a, b), back)


def transpose(a):
    return Tensor(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), back)


def tsum(a, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def tanh(a):
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def tabs(a):
    return Tensor(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def clip(a, lo, hi):
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = astensor(a), astensor(b)
    pick_a = a.value <= b.value
    return Tensor(np.minimum(a.value, b.value), (a, b),
                  lambda g: (_unbroadcast(g * pick_a, a.shape),
                             _unbroadcast(g * ~pick_a, b.shape)))


def log_sigmoid(a):
    """log(1 / (1 + exp(-a))), stable for large |a|."""
    out = -np.logaddexp(0.0, -a.value)
    sig = np.exp(out)
    return Tensor(out, (a,), lambda g: (g * (1.0 - sig),))


def concat(tensors, axis=-1):
    tensors = [astensor(t) for t in tensors]
    sizes = np.cumsum([t.value.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), back)


# ----------------------------------------------------------------------
# parameters and networks


class ParamSet(dict):
    """Named float64 arrays with a stable (insertion) flattening order."""

    def copy(self):
        return ParamSet((k, np.array(v, dtype=DTYPE, copy=True)) for k, v in self.items())

    @property
    def size(self):
        return int(sum(np.size(v) for v in self.values()))

    def flatten(self):
        if not self:
            return np.zeros(0)
        return np.concatenate([np.ravel(v) for v in self.values()]).astype(DTYPE)

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=DTYPE)
        if vector.shape != (self.size,):
            raise ContractError(f"expected flat vector of length {self.size}, got {vector.shape}")
        out, start = ParamSet(), 0
        for k, v in self.items():
            n = np.size(v)
            out[k] = vector[start:start + n].reshape(np.shape(v)).copy()
            start += n
        return out

    def map(self, fn):
        return ParamSet((k, fn(v)) for k, v in self.items())

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``(in, hidden..., out)`` plus activations.

    ``output_activation`` is ``"identity"`` or ``"tanh"`` (bounded heads).
    """

    sizes: tuple
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 3:
            raise ContractError("an MLP needs at least one hidden layer")
        if any(s <= 0 for s in sizes):
            raise ContractError(f"layer widths must be positive, got {sizes}")
        for act in (self.activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def to_dict(self):
        return {"sizes": list(self.sizes), "activation": self.activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["sizes"]), d.get("activation", "tanh"),
                   d.get("output_activation", "identity"))


_ACTIVATIONS = {
    "tanh": (np.tanh, tanh),
    "identity": (lambda x: x, lambda x: x),
}


def mlp(in_dim, out_dim, hidden=(32, 32), output_activation="identity"):
    return MLPSpec((in_dim, *hidden, out_dim), "tanh", output_activation)


def init_params(spec, rng, out_scale=1.0):
    """Scaled-normal weights (1/sqrt(fan_in)), zero biases.

    ``out_scale`` shrinks the last layer, e.g. ``0.0`` for a network that
    starts at exactly zero output.
    """
    params = ParamSet()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        scale = 1.0 / np.sqrt(fan_in)
        if i == spec.n_layers - 1:
            scale *= out_scale
        params[f"W{i}"] = rng.normal(0.0, 1.0, size=(fan_in, fan_out)) * scale
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _check_input(spec, x):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != spec.sizes[0]:
        raise ContractError(f"input dimension {x.shape[-1]} != network input {spec.sizes[0]}")
    return x


def forward(spec, params, x):
    """Evaluate the network on a vector or a row-batch of inputs."""
    x = _check_input(spec, x)
    act = _ACTIVATIONS[spec.activation][0]
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        h = act(h) if i < last else _ACTIVATIONS[spec.output_activation][0](h)
    return h


def forward_t(spec, params, x):
    """Taped forward pass; ``params`` maps names to ``Tensor`` leaves."""
    if isinstance(x, Tensor):
        if x.shape[-1] != spec.sizes[0]:
            raise ContractError(f"input dimension {x.shape[-1]} != network input {spec.sizes[0]}")
        h = x
    else:
        h = Tensor(_check_input(spec, x))
    act = _ACTIVATIONS[spec.activation][1]
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        h = act(h) if i < last else _ACTIVATIONS[spec.output_activation][1](h)
    return h


# ----------------------------------------------------------------------
# gradients


def _tree_map(fn, tree):
    if isinstance(tree, dict) and not isinstance(tree, ParamSet):
        return {k: _tree_map(fn, v) for k, v in tree.items()}
    if isinstance(tree, ParamSet):
        return ParamSet((k, fn(v)) for k, v in tree.items())
    return fn(tree)


def _tree_leaves(tree):
    if isinstance(tree, dict):
        for v in tree.values():
            yield from _tree_leaves(v)
    else:
        yield tree


def gradient(loss_fn, params):
    """Value and reverse-mode gradient of ``loss_fn`` at ``params``.

    ``params`` is a ParamSet, a bare array, or a (nested) dict of them.
    ``loss_fn`` receives the same structure with ``Tensor`` leaves and must
    return a scalar ``Tensor``. The gradient comes back in the input
    structure.
    """
    leaves = _tree_map(lambda v: Tensor(np.array(v, dtype=DTYPE, copy=True)), params)
    loss = loss_fn(leaves)
    value = float(np.asarray(loss.value).reshape(()))
    if not np.isfinite(value):
        raise NumericalError(f"loss is not finite: {value}")
    loss.backward()
    grads = _tree_map(lambda t: np.zeros_like(t.value) if t.grad is None else t.grad, leaves)
    return value, grads


def flatten_tree(tree):
    parts = [np.ravel(np.asarray(v, dtype=DTYPE)) for v in _tree_leaves(tree)]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_tree(tree, vector):
    leaves = list(_tree_leaves(tree))
    it, pos = iter(leaves), [0]

    def take(v):
        next(it)
        n = np.size(v)
        out = vector[pos[0]:pos[0] + n].reshape(np.shape(v)).copy()
        pos[0] += n
        return out

    return _tree_map(take, tree)


def finite_difference(loss_fn, params, h=1e-5):
    """Central-difference gradient of a plain-numpy loss, same structure as params."""
    flat = flatten_tree(params)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_fn(unflatten_tree(params, up)) - loss_fn(unflatten_tree(params, down))) / (2 * h)
    return unflatten_tree(params, grad)


# ----------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(params, grad, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. Returns fresh ``(params, state)``; inputs are untouched.

    ``params`` and ``grad`` share structure (see ``gradient``).
    """
    flat_g = flatten_tree(grad)
    flat_p = flatten_tree(params)
    if flat_g.shape != flat_p.shape:
        raise ContractError(f"gradient size {flat_g.size} != parameter size {flat_p.size}")
    if not np.all(np.isfinite(flat_g)):
        raise NumericalError("non-finite gradient")
    t = state.t + 1
    m = state.m.get("flat", np.zeros_like(flat_p))
    v = state.v.get("flat", np.zeros_like(flat_p))
    m = beta1 * m + (1.0 - beta1) * flat_g
    v = beta2 * v + (1.0 - beta2) * flat_g * flat_g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_flat = flat_p - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return unflatten_tree(params, new_flat), AdamState({"flat": m}, {"flat": v}, t)


# ----------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, u64 little-endian header length, UTF-8 JSON header, then the
# tensors' row-major little-endian float64 payloads back to back in header
# order. The header lists {"name", "shape"} per tensor plus free-form "meta".

MAGIC = b"DMSRD-TENSORS\x00v1\n"


def save_tensors(path, tensors, meta=None):
    path = Path(path)
    names = list(tensors)
    arrays = [np.asarray(tensors[n], dtype="<f8", order="C") for n in names]
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes(order="C"))
    tmp.replace(path)


def load_tensors(path):
    """Inverse of ``save_tensors``: returns ``(dict name -> array, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    if not data.startswith(MAGIC):
        raise IntegrityError("bad checkpoint magic", path)
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            nbytes = 8 * n
            if pos + nbytes > len(data):
                raise IntegrityError("truncated checkpoint payload", path)
            out[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
            pos += nbytes
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint header ({exc})", path) from exc
    if pos != len(data):
        raise IntegrityError("trailing bytes in checkpoint", path)
    return out, header.get("meta", {})


def params_to_tensors(prefix, params):
    return {f"{prefix}/{k}": v for k, v in params.items()}


def params_from_tensors(prefix, tensors):
    head = prefix + "/"
    return ParamSet((k[len(head):], v) for k, v in tensors.items() if k.startswith(head))
