"""Dense reverse-mode differentiation on numpy arrays.

Only the operations needed by the message-passing engine are provided:
matmul, broadcasting arithmetic, concat, row gather, segment reductions
(sum/mean/max/softmax), elementwise activations, dropout and the
cross-entropy loss.  Every op records a closure that maps the output
gradient to input gradients; :func:`backward` walks the tape in reverse
topological order.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, NumericalError

__all__ = [
    "Tensor", "ParamStore", "Segments", "backward", "forward_backward",
    "adam_step", "Adam", "grad_check", "glorot", "save_checkpoint", "load_checkpoint",
    "ACTIVATIONS", "activation",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype.kind != "f" else data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents=parents, backward=backward, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError("concat: shape mismatch "
                            + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)
    return _make(out, tensors, bw, "concat")


def columns(a, lo, hi):
    """Column slice ``a[:, lo:hi]``."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        return (full,)
    return _make(a.data[:, lo:hi], (a,), bw, "columns")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),), "sqrt")


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a scalar floor."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# activations


def _unary(fn, dfn, name):
    def op(a):
        a = as_tensor(a)
        out = fn(a.data)
        return _make(out, (a,), lambda g: (g * dfn(a.data, out),), name)
    op.__name__ = name
    return op


relu = _unary(lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype), "relu")
leaky_relu = _unary(lambda x: np.where(x > 0, x, 0.2 * x),
                    lambda x, y: np.where(x > 0, 1.0, 0.2), "leaky_relu")
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


sigmoid = _unary(_sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")
elu = _unary(lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
             lambda x, y: np.where(x > 0, 1.0, y + 1.0), "elu")
softplus = _unary(lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x), "softplus")
relu6 = _unary(lambda x: np.clip(x, 0.0, 6.0),
               lambda x, y: ((x > 0) & (x < 6)).astype(x.dtype), "relu6")


def identity(a):
    return as_tensor(a)


ACTIVATIONS = OrderedDict([
    ("sigmoid", sigmoid), ("tanh", tanh), ("relu", relu), ("identity", identity),
    ("softplus", softplus), ("leaky_relu", leaky_relu), ("relu6", relu6), ("elu", elu),
])


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# gather / segment reductions


def gather_rows(a, index):
    """``a[index]`` with scatter-add backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        m = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                          shape=(n, index.size))
        return (np.asarray(m @ g.reshape(index.size, -1)).reshape((n,) + g.shape[1:]),)
    return _make(a.data[index], (a,), bw, "gather_rows")


class Segments:
    """Grouping of ``E`` rows into ``n`` segments (e.g. arcs by destination)."""

    def __init__(self, seg, num_segments):
        self.seg = np.asarray(seg, dtype=np.int64)
        self.n = int(num_segments)
        e = self.seg.size
        if e and (self.seg.min() < 0 or self.seg.max() >= self.n):
            raise ContractError("segment id out of range")
        self.matrix = sp.csr_matrix((np.ones(e), (self.seg, np.arange(e))), shape=(self.n, e))
        self.counts = np.bincount(self.seg, minlength=self.n)
        self.order = np.argsort(self.seg, kind="stable")
        ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.counts, out=ptr[1:])
        self.ptr = ptr
        self.nonempty = np.flatnonzero(self.counts > 0)

    def sum(self, values):
        v = values.reshape(values.shape[0], -1)
        return np.asarray(self.matrix @ v).reshape((self.n,) + values.shape[1:])

    def broadcast(self, values):
        return values[self.seg]

    def max_with_argmax(self, values):
        """Per-segment max and the winning row (ties to the lowest row index)."""
        shape = values.shape[1:]
        v = values.reshape(values.shape[0], -1)
        out = np.zeros((self.n, v.shape[1]))
        arg = np.full((self.n, v.shape[1]), -1, dtype=np.int64)
        if self.nonempty.size:
            sv = v[self.order]
            starts = self.ptr[self.nonempty]
            mx = np.maximum.reduceat(sv, starts, axis=0)
            out[self.nonempty] = mx
            hit = sv == out[self.seg[self.order]]
            rows = np.where(hit, self.order[:, None], np.iinfo(np.int64).max)
            arg[self.nonempty] = np.minimum.reduceat(rows, starts, axis=0)
        return out.reshape((self.n,) + shape), arg


def segment_sum(a, segs: Segments):
    a = as_tensor(a)
    if a.shape[0] != segs.seg.size:
        raise ContractError(f"segment_sum: {a.shape[0]} rows for {segs.seg.size} segment ids")
    return _make(segs.sum(a.data), (a,), lambda g: (segs.broadcast(g),), "segment_sum")


def segment_mean(a, segs: Segments):
    a = as_tensor(a)
    denom = np.maximum(segs.counts, 1).astype(np.float64)
    denom = denom.reshape((-1,) + (1,) * (a.data.ndim - 1))
    return _make(segs.sum(a.data) / denom, (a,),
                 lambda g: (segs.broadcast(g / denom),), "segment_mean")


def segment_max(a, segs: Segments):
    """Per-segment max; empty segments yield 0, ties route to the lowest row."""
    a = as_tensor(a)
    if a.shape[0] != segs.seg.size:
        raise ContractError(f"segment_max: {a.shape[0]} rows for {segs.seg.size} segment ids")
    out, arg = segs.max_with_argmax(a.data)
    flat_shape = (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64)))

    def bw(g):
        gf = g.reshape(segs.n, -1)
        grad = np.zeros(flat_shape)
        rows, cols = np.nonzero(arg >= 0)
        np.add.at(grad, (arg[rows, cols], cols), gf[rows, cols])
        return (grad.reshape(a.shape),)
    return _make(out, (a,), bw, "segment_max")


def segment_softmax(a, segs: Segments):
    """Softmax of ``a`` within each segment (row-softmax over a neighbourhood)."""
    a = as_tensor(a)
    mx, _ = segs.max_with_argmax(a.data)
    e = np.exp(a.data - segs.broadcast(mx))
    z = segs.sum(e)
    out = e / segs.broadcast(np.where(z > 0, z, 1.0))

    def bw(g):
        dot = segs.sum(g * out)
        return (out * (g - segs.broadcast(dot)),)
    return _make(out, (a,), bw, "segment_softmax")


def softmax_rows(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),), "softmax")


def log_softmax_np(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels, index=None):
    """Mean negative log-likelihood of ``labels`` over rows ``index``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0]) if index is None else np.asarray(index, dtype=np.int64)
    if rows.size == 0:
        raise ContractError("cross_entropy over an empty index set")
    lp = log_softmax_np(logits.data[rows])
    loss = -lp[np.arange(rows.size), labels[rows]].mean()

    def bw(g):
        p = np.exp(lp)
        p[np.arange(rows.size), labels[rows]] -= 1.0
        grad = np.zeros(logits.shape)
        np.add.at(grad, rows, p * (g / rows.size))
        return (grad,)
    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def dropout(a, p, rng, training=True):
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        raise ContractError("dropout probability must be < 1")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
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


def backward(loss: Tensor, debug=False):
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf on the tape."""
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if debug and not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient at op {node.op}")
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments."""

    def __init__(self):
        self.params = OrderedDict()
        self.state = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return OrderedDict((k, np.zeros_like(t.data) if t.grad is None else t.grad)
                           for k, t in self.params.items())

    def num_scalars(self):
        return int(sum(t.data.size for t in self.params.values()))

    def snapshot(self):
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def load(self, values):
        for k, v in values.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self):
        other = ParamStore()
        for k, t in self.params.items():
            other.add(k, t.data.copy())
        return other


def glorot(rng, fan_in, fan_out, shape=None):
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out))


def forward_backward(fn, params: ParamStore, debug=False):
    """Evaluate ``fn(params)`` (a scalar Tensor) and its parameter gradients."""
    params.zero_grad()
    loss = fn(params)
    backward(loss, debug=debug)
    return float(loss.data), params.grads()


def adam_step(params: ParamStore, grads, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """One Adam update with decoupled weight decay, applied in place."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != {p.data.shape} for {name}")
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        m, v = params.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params.state[name] = (m, v)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay

    def step(self, grads=None):
        grads = self.params.grads() if grads is None else grads
        return adam_step(self.params, grads, self.lr, self.beta1, self.beta2, self.eps,
                         self.weight_decay)


def grad_check(fn, params: ParamStore, h=1e-5, max_entries=64, seed=0, floor=1e-6):
    """Compare reverse-mode gradients against central differences.

    ``fn(params)`` must return a scalar Tensor and be deterministic.  Large
    parameters are subsampled to ``max_entries`` scalars.  Relative error is
    ``|a - n| / max(|a| + |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    _, grads = forward_backward(fn, params)
    report = {"max_rel_err": 0.0, "per_param": {}, "checked": 0}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        g = grads[name].reshape(-1)
        for i in idx.tolist():
            old = flat[i]
            flat[i] = old + h
            fp = float(fn(params).data)
            flat[i] = old - h
            fm = float(fn(params).data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(g[i] - num) / max(abs(g[i]) + abs(num), floor)
            worst = max(worst, err)
        report["per_param"][name] = worst
        report["checked"] += idx.size
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    return report


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_VERSION = 1


def save_checkpoint(path, params):
    """Write parameters as ``version | count | (name, shape)* | float32 data``."""
    values = params.snapshot() if isinstance(params, ParamStore) else params
    with open(path, "wb") as fh:
        fh.write(struct.pack("<BI", _CKPT_VERSION, len(values)))
        for name, v in values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", v.ndim))
            fh.write(struct.pack(f"<{v.ndim}I", *v.shape))
        for v in values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    version, count = struct.unpack_from("<BI", blob, 0)
    if version != _CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 5
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        table.append((name, shape))
    out = OrderedDict()
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape) \
            .astype(np.float64)
        off += 4 * n
    return out
