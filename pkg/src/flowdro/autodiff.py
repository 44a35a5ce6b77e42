"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations as they are executed
(define-by-run). The recorded program can be replayed on new input values
with :func:`tape_eval` and differentiated with :func:`tape_backward`.
Trainable parameters live in a :class:`ParamStore`; their gradients are
accumulated there during the backward pass.

The primitive set is deliberately small: affine maps, elementwise
softplus/tanh/relu/exp, add/mul/scale/shift, sum/mean/squared-norm
reductions, log-sum-exp and softmax cross-entropy. There is no general
broadcasting: operands of ``add``/``mul`` must have equal shapes, and the
only implicit broadcast is the bias row of ``affine``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ShapeError

CHECKPOINT_VERSION = 1


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _expand(g, shape, axis):
    """Broadcast a reduced gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


# Each primitive: forward(*input_values, **attrs) -> value,
# backward(g, out, *input_values, **attrs) -> tuple of input gradients.

def _affine_fwd(x, w, b=None):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: cannot map {x.shape} with weight {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b
    return out


def _affine_bwd(g, out, x, w, b=None):
    grads = (g @ w.T, x.T @ g)
    if b is not None:
        grads = grads + (g.sum(axis=0),)
    return grads


def _same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _add_fwd(a, b):
    _same("add", a, b)
    return a + b


def _mul_fwd(a, b):
    _same("mul", a, b)
    return a * b


def _reduce_axis(x, axis):
    if axis is not None and not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


def _sum_fwd(x, axis=None):
    _reduce_axis(x, axis)
    return np.asarray(x.sum(axis=axis))


def _mean_fwd(x, axis=None):
    _reduce_axis(x, axis)
    return np.asarray(x.mean(axis=axis))


def _mean_bwd(g, out, x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    return (_expand(g, x.shape, axis) / count,)


def _sqnorm_fwd(x, axis=None):
    _reduce_axis(x, axis)
    return np.asarray((x * x).sum(axis=axis))


def _lse_fwd(x, axis=1):
    _reduce_axis(x, axis)
    m = x.max(axis=axis, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def _lse_bwd(g, out, x, axis=1):
    return (np.exp(x - np.expand_dims(out, axis)) * np.expand_dims(g, axis),)


def _xent_fwd(logits, labels):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape}, labels {labels.shape}")
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return lse - logits[np.arange(len(labels)), labels]


def _xent_bwd(g, out, logits, labels):
    p = _softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return (p * g[:, None],)


def _softplus_fwd(x, beta=20.0):
    return np.logaddexp(0.0, beta * x) / beta


_OPS = {
    "affine": (_affine_fwd, _affine_bwd),
    "add": (_add_fwd, lambda g, out, a, b: (g, g)),
    "mul": (_mul_fwd, lambda g, out, a, b: (g * b, g * a)),
    "scale": (lambda x, c: x * c, lambda g, out, x, c: (g * c,)),
    "shift": (lambda x, c: x + c, lambda g, out, x, c: (g,)),
    "softplus": (_softplus_fwd, lambda g, out, x, beta=20.0: (g * _expit(beta * x),)),
    "tanh": (np.tanh, lambda g, out, x: (g * (1.0 - out * out),)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),)),
    "exp": (np.exp, lambda g, out, x: (g * out,)),
    "sum": (_sum_fwd, lambda g, out, x, axis=None: (np.array(_expand(g, x.shape, axis)),)),
    "mean": (_mean_fwd, _mean_bwd),
    "sqnorm": (_sqnorm_fwd, lambda g, out, x, axis=None: (2.0 * x * _expand(g, x.shape, axis),)),
    "logsumexp": (_lse_fwd, _lse_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
}


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Node):
            return self.tape.add(self, other)
        return self.tape.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.tape.add(self, self.tape.scale(other, -1.0))
        return self.tape.shift(self, -np.asarray(other))

    def __rsub__(self, other):
        return self.tape.shift(self.tape.scale(self, -1.0), other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        op = self.tape.ops[self.index][0]
        return f"Node({op}, shape={self.shape})"


class Tape:
    """Record of primitive operations and their values.

    Nodes form a DAG in recording order: every input index refers to an
    earlier node. ``checked=True`` traps NaN/Inf at every recorded value.
    """

    def __init__(self, checked=False):
        self.checked = checked
        self.ops = []  # (op, input_indices, attrs)
        self.values = []
        self.adjoints = None
        self.output = None
        self._inputs = []
        self._params = {}  # node index -> (store, name)

    def __len__(self):
        return len(self.ops)

    def _push(self, op, inputs, attrs, value):
        value = _as_array(value) if not isinstance(value, np.ndarray) else value
        if self.checked and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {op!r} at node {len(self.ops)}")
        self.ops.append((op, tuple(inputs), attrs))
        self.values.append(value)
        self.adjoints = None
        node = Node(self, len(self.ops) - 1)
        self.output = node
        return node

    # leaves

    def input(self, value):
        node = self._push("input", (), {}, _as_array(value))
        self._inputs.append(node.index)
        return node

    def const(self, value):
        return self._push("const", (), {}, _as_array(value))

    def param(self, store, name):
        node = self._push("param", (), {"name": name}, store.params[name])
        self._params[node.index] = (store, name)
        return node

    # primitives

    def _apply(self, op, args, **attrs):
        for a in args:
            if a.tape is not self:
                raise ValueError("operand recorded on a different tape")
        fwd = _OPS[op][0]
        value = fwd(*(a.value for a in args), **attrs)
        return self._push(op, (a.index for a in args), attrs, value)

    def affine(self, x, w, b=None):
        return self._apply("affine", (x, w) if b is None else (x, w, b))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def scale(self, a, c):
        return self._apply("scale", (a,), c=float(c))

    def shift(self, a, c):
        c = _as_array(c)
        np.broadcast_shapes(a.shape, c.shape)
        return self._apply("shift", (a,), c=c)

    def softplus(self, x, beta=20.0):
        return self._apply("softplus", (x,), beta=float(beta))

    def tanh(self, x):
        return self._apply("tanh", (x,))

    def relu(self, x):
        return self._apply("relu", (x,))

    def exp(self, x):
        return self._apply("exp", (x,))

    def sum(self, x, axis=None):
        return self._apply("sum", (x,), axis=axis)

    def mean(self, x, axis=None):
        return self._apply("mean", (x,), axis=axis)

    def sqnorm(self, x, axis=None):
        return self._apply("sqnorm", (x,), axis=axis)

    def logsumexp(self, x, axis=1):
        return self._apply("logsumexp", (x,), axis=axis)

    def softmax_xent(self, logits, labels):
        labels = np.asarray(labels, dtype=np.intp)
        return self._apply("softmax_xent", (logits,), labels=labels)

    def activation(self, x, kind, beta=20.0):
        if kind == "softplus":
            return self.softplus(x, beta)
        if kind == "tanh":
            return self.tanh(x)
        if kind == "relu":
            return self.relu(x)
        raise ValueError(f"unknown activation {kind!r}")

    # evaluation

    def replay(self, inputs):
        """Recompute every node with new input values; parameters are re-read."""
        if len(inputs) != len(self._inputs):
            raise ShapeError(f"expected {len(self._inputs)} inputs, got {len(inputs)}")
        given = dict(zip(self._inputs, inputs))
        values = []
        for i, (op, args, attrs) in enumerate(self.ops):
            if op == "input":
                v = _as_array(given[i])
                if v.shape != self.values[i].shape:
                    raise ShapeError(f"input {i}: shape {v.shape} != declared {self.values[i].shape}")
            elif op == "const":
                v = self.values[i]
            elif op == "param":
                store, name = self._params[i]
                v = store.params[name]
            else:
                v = _OPS[op][0](*(values[j] for j in args), **attrs)
            if self.checked and not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite value produced by {op!r} at node {i}")
            values.append(v)
        self.values = values
        self.adjoints = None

    def backward(self, out=None, seed=None):
        """Propagate adjoints from ``out`` (default: last recorded node).

        Parameter gradients are added into their stores' gradient buffers.
        Returns the list of adjoints of the input nodes (in creation order).
        """
        if not self.ops:
            raise RuntimeError("backward called on an empty tape")
        out = self.output if out is None else out
        value = self.values[out.index]
        if seed is None:
            seed = np.ones_like(value)
        seed = _as_array(seed)
        if seed.shape != value.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {value.shape}")

        adj = [None] * len(self.ops)
        adj[out.index] = seed
        for i in range(out.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op, args, attrs = self.ops[i]
            if not args:
                continue
            grads = _OPS[op][1](g, self.values[i], *(self.values[j] for j in args), **attrs)
            for j, gj in zip(args, grads):
                adj[j] = gj if adj[j] is None else adj[j] + gj
        for i in range(len(adj)):
            if adj[i] is None:
                adj[i] = np.zeros_like(self.values[i])
        self.adjoints = adj
        for i, (store, name) in self._params.items():
            if i <= out.index:
                store.accumulate(name, adj[i])
        return [adj[i] for i in self._inputs]

    def grad(self, node):
        if self.adjoints is None:
            raise RuntimeError("no adjoints: run backward first")
        return self.adjoints[node.index]


def tape_eval(tape, inputs):
    """Replay ``tape`` on ``inputs`` and return the value of its output node."""
    tape.replay(inputs)
    return tape.values[tape.output.index]


def tape_backward(tape, seed=None):
    """Backward pass from the tape's output; returns the input gradients."""
    if tape.output is None:
        raise RuntimeError("backward before forward")
    return tape.backward(tape.output, seed)


class ParamStore:
    """Named parameter arrays with gradient buffers and Adam state."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0
        self._fresh = False

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def set(self, name, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name] = value

    def accumulate(self, name, g):
        buf = self.grads[name]
        if g.shape != buf.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {buf.shape}")
        self.grads[name] = buf + g
        self._fresh = True

    def zero_grad(self):
        for name in self.grads:
            self.grads[name] = np.zeros_like(self.params[name])
        self._fresh = False

    def flat(self):
        """Concatenated parameter vector in name order."""
        return np.concatenate([self.params[n].ravel() for n in self.params]) if self.params else np.zeros(0)

    def flat_grad(self):
        return np.concatenate([self.grads[n].ravel() for n in self.params]) if self.params else np.zeros(0)

    def load_flat(self, vec):
        i = 0
        for name, p in self.params.items():
            self.params[name] = np.array(vec[i:i + p.size], dtype=np.float64).reshape(p.shape)
            i += p.size

    def copy(self):
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p)
        return other


def adam_step(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update from the accumulated gradients, which are then zeroed."""
    if not params._fresh:
        raise RuntimeError("adam_step: no gradients accumulated since the last step")
    b1, b2 = betas
    params.step += 1
    t = params.step
    for name, p in params.params.items():
        g = params.grads[name]
        m = b1 * params.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * params.v.get(name, 0.0) + (1.0 - b2) * g * g
        params.m[name] = m
        params.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params.params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grad()
    return params


def sgd_step(params, lr):
    if not params._fresh:
        raise RuntimeError("sgd_step: no gradients accumulated since the last step")
    params.step += 1
    for name, p in params.params.items():
        params.params[name] = p - lr * params.grads[name]
    params.zero_grad()
    return params


# checkpoints

def _nested(arr):
    if arr.ndim == 0:
        return format(float(arr), ".17g")
    return "[" + ",".join(_nested(a) for a in arr) + "]"


def checkpoint_text(store, include_optimizer=True):
    """Serialize a ParamStore to the versioned JSON checkpoint format.

    Floats are written with 17 significant digits, which round-trips float64
    exactly.
    """
    names = store.names()
    shapes = [list(store.params[n].shape) for n in names]
    values = ",".join(_nested(store.params[n]) for n in names)
    parts = [
        f'"format_version": {CHECKPOINT_VERSION}',
        f'"param_names": {json.dumps(names)}',
        f'"shapes": {json.dumps(shapes)}',
        f'"values": [{values}]',
    ]
    if include_optimizer and store.step > 0:
        m = ",".join(_nested(np.asarray(store.m.get(n, np.zeros_like(store.params[n])))) for n in names)
        v = ",".join(_nested(np.asarray(store.v.get(n, np.zeros_like(store.params[n])))) for n in names)
        parts.append(f'"optimizer_state": {{"step": {store.step}, "m": [{m}], "v": [{v}]}}')
    return "{" + ", ".join(parts) + "}\n"


def save_checkpoint(store, path, include_optimizer=True):
    Path(path).write_text(checkpoint_text(store, include_optimizer))


def parse_checkpoint(text):
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    store = ParamStore()
    for name, shape, vals in zip(doc["param_names"], doc["shapes"], doc["values"]):
        store.add(name, np.array(vals, dtype=np.float64).reshape(shape))
    opt = doc.get("optimizer_state")
    if opt:
        store.step = int(opt["step"])
        for name, shape, m, v in zip(doc["param_names"], doc["shapes"], opt["m"], opt["v"]):
            store.m[name] = np.array(m, dtype=np.float64).reshape(shape)
            store.v[name] = np.array(v, dtype=np.float64).reshape(shape)
    return store


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_text())
