"""A small dense-tensor graph with reverse-mode differentiation.

Every forward primitive returns a :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients into leaf parameters.

Only what the encoder-decoder needs is here: LSTM cells, dot/MLP attention,
softmax mixtures, dropout and log-likelihoods.
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, NonFiniteValue, ShapeMismatch

# Added to every log argument; attention sums in the coverage term can be 0.
LOG_EPS = 1e-12

CHECKPOINT_FORMAT = "d2tgen-params"
CHECKPOINT_VERSION = 1

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float64
_local = threading.local()


def set_precision(bits):
    """Set the float width (32 or 64) used for new tensors."""
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


@contextmanager
def precision(bits):
    global _dtype
    old = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        _dtype = old


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    old = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tensor:
    """A graph node holding a numpy array."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite value produced by {what}")


def _node(out, parents, backward_fn, what):
    _check_finite(out, what)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.parents = parents
        t.backward_fn = backward_fn
        t.requires_grad = True
    else:
        t.parents = ()
        t.backward_fn = None
        t.requires_grad = False
    return t


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{what}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a):
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(a)) without under/overflow."""
    y = -np.logaddexp(0.0, -a.data)
    s = 0.5 * (1.0 - np.tanh(0.5 * a.data))  # sigmoid(-a)
    return _node(y, (a,), lambda g: (g * s,), "log_sigmoid")


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    """Natural log with the global epsilon guard: log(a + LOG_EPS)."""
    x = a.data + LOG_EPS
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {exc}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), bw, "stack")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx):
    """Slice or fancy-index ``a``; repeated fancy indices accumulate gradient."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), bw, "slice")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- probability


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    """Fused log(softmax(a)) with max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (a,), bw, "log_softmax")


def gather(a, index):
    """Pick ``a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeMismatch(f"gather: index {index.shape} vs values {a.shape}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), bw, "gather")


def embedding(weight, ids):
    """Rows of ``weight`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeMismatch(f"embedding id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(out, (weight,), bw, "embedding")


def dropout(a, p, train, rng=None):
    """Inverted dropout; the identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            _check_finite(g, f"gradient of {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, params, eps=1e-5, max_coords=None, rng=None):
    """Compare analytic gradients with central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    given parameters (it must be deterministic).  At most ``max_coords``
    coordinates per parameter are probed, sampled with ``rng``.  Returns the
    largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if get_dtype() is not np.float64:
        raise ValueError("grad_check requires 64-bit precision")
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = ga.reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters with gradient buffers.

    Two stores may hold the very same :class:`Parameter` object under one
    name; that is how ensemble members share weights.
    """

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = value if isinstance(value, Parameter) else Parameter(value, name=name)
        p.name = name
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def num_values(self):
        return sum(p.data.size for p in self._params.values())

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {
                    "shape": list(p.shape),
                    "dtype": str(p.data.dtype),
                    "values": p.data.reshape(-1).tolist(),
                }
                for name, p in self._params.items()
            },
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    def load_dict(self, payload):
        """Copy values from a serialized map into the existing parameters."""
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatch("unrecognized checkpoint format or version")
        stored = payload["params"]
        if set(stored) != set(self._params):
            missing = sorted(set(self._params) - set(stored))
            extra = sorted(set(stored) - set(self._params))
            raise CheckpointMismatch(f"parameter names differ (missing={missing}, extra={extra})")
        for name, p in self._params.items():
            entry = stored[name]
            if tuple(entry["shape"]) != p.shape:
                raise CheckpointMismatch(f"{name}: checkpoint shape {entry['shape']} != {list(p.shape)}")
            values = np.asarray(entry["values"], dtype=np.dtype(entry["dtype"]))
            p.data[...] = values.reshape(p.shape)

    def load(self, path):
        self.load_dict(json.loads(Path(path).read_text()))
