"""Tiny reverse-mode autodiff over numpy arrays.

Only the handful of primitives the certificate and policy networks need are
provided. Forward matrix products go through a non-BLAS ``einsum`` kernel so that
every output row depends only on its own input row, bit for bit; this is what
makes the set encoder exactly permutation invariant in floating point.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .errors import CheckpointError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        # non-leaf grads are scratch space; reset so repeated backward calls are clean
        for node in order:
            if node._parents:
                node.grad = None
        self._accum(np.asarray(grad, dtype=float))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return index(self, idx)


class ParamBlock(Tensor):
    """A named trainable array; ``grad`` accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, name, values):
        super().__init__(np.array(values, dtype=float), requires_grad=True)
        self.name = name

    @property
    def values(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def exact_matmul(x, W):
    """``x @ W.T`` over the last axis of ``x``; row results independent of other rows."""
    return np.einsum("...d,pd->...p", x, W)


# ----------------------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def neg(a):
    out = Tensor(-a.data, (a,))
    out._backward = lambda g: a._accum(-g)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def affine(W, b, x):
    """``W x + b`` applied to the last axis of ``x`` (rows are samples/columns)."""
    W, x = as_tensor(W), as_tensor(x)
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[1]:
        raise ValueError(f"affine shape mismatch: W{W.shape} vs x{x.shape}")
    y = exact_matmul(x.data, W.data)
    parents = (W, x)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (W.data.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match W{W.shape}")
        y = y + b.data
        parents = (W, x, b)
    out = Tensor(y, parents)

    def backward(g):
        if W.requires_grad:
            W._accum(g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.data.shape[-1]))
        if x.requires_grad:
            x._accum(g @ W.data)
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = backward
    return out


def affine_const(x, M):
    """``x @ M.T`` for a constant matrix ``M``."""
    return affine(Tensor(M, requires_grad=False), None, x)


def relu(x):
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,))
    out._backward = lambda g: x._accum(g * (x.data > 0))
    return out


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t, (x,))
    out._backward = lambda g: x._accum(g * (1.0 - t * t))
    return out


def clip(x, lo, hi):
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), (x,))
    inside = (x.data >= lo) & (x.data <= hi)
    out._backward = lambda g: x._accum(g * inside)
    return out


def square(x):
    x = as_tensor(x)
    out = Tensor(x.data * x.data, (x,))
    out._backward = lambda g: x._accum(2.0 * g * x.data)
    return out


def sum_(x, axis=None):
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis), (x,))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    out._backward = backward
    return out


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    out = Tensor(n, (x,))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        x._accum(np.expand_dims(scale, axis) * x.data)

    out._backward = backward
    return out


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            p._accum(gp)

    out._backward = backward
    return out


def index(x, idx):
    x = as_tensor(x)
    out = Tensor(x.data[idx], (x,))

    basic = all(
        isinstance(i, (slice, int)) or i is Ellipsis for i in (idx if isinstance(idx, tuple) else (idx,))
    )

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        x._accum(full)

    out._backward = backward
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), (x,))
    out._backward = lambda g: x._accum(g.reshape(x.shape))
    return out


def _max_over(x, axis):
    """Max along ``axis``; gradient goes to the lowest-index maximiser. Empty axis -> 0."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        shape = list(x.shape)
        del shape[axis]
        out = Tensor(np.zeros(shape), (x,))
        out._backward = lambda g: None
        return out
    arg = np.argmax(x.data, axis=axis)
    val = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = Tensor(val, (x,))

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        x._accum(full)

    out._backward = backward
    return out


def row_max_pool(features):
    """Per-row maximum of a ``p x k`` matrix; ``k == 0`` gives the zero vector."""
    features = as_tensor(features)
    if features.data.ndim != 2:
        raise ValueError("row_max_pool expects a p x k matrix")
    return _max_over(features, axis=1)


def masked_max_pool(features, mask):
    """Pool ``(B, K, p)`` non-negative features over K, ignoring entries where ``mask`` is False.

    Masked entries are set to 0 before pooling. Because the inputs are ReLU
    outputs (>= 0), this is identical to pooling the unmasked columns alone,
    with the zero vector as the value for an empty set.
    """
    features = as_tensor(features)
    m = np.asarray(mask, dtype=float)[..., None]
    return _max_over(mul(features, m), axis=1)


# ----------------------------------------------------------------------------- training


def sgd_step(params, lr, weight_decay=0.0):
    """``v <- v - lr * (grad + weight_decay * v)``, then zero grads.

    A block with a non-finite gradient is left untouched for this step.
    Returns the names of skipped blocks.
    """
    skipped = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; update skipped", p.name)
            skipped.append(p.name)
        else:
            p.data -= lr * (g + weight_decay * p.data)
        p.grad = None
    return skipped


# ----------------------------------------------------------------------------- persistence


def save(params, path, dynamics_kind="", meta=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "dynamics_kind": dynamics_kind,
        "meta": meta or {},
        "blocks": [
            {"name": p.name, "shape": list(p.data.shape), "values": p.data.ravel().tolist()}
            for p in params
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load(path):
    """Read a checkpoint; returns ``(blocks, dynamics_kind, meta)`` with blocks as a dict."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: missing or unsupported format_version")
    if "blocks" not in doc or "dynamics_kind" not in doc:
        raise CheckpointError(f"{path}: malformed header")
    blocks = {}
    for b in doc["blocks"]:
        shape = tuple(b["shape"])
        vals = np.asarray(b["values"], dtype=float)
        if vals.size != math.prod(shape):
            raise CheckpointError(f"{path}: block {b['name']} has {vals.size} values for shape {shape}")
        blocks[b["name"]] = ParamBlock(b["name"], vals.reshape(shape))
    return blocks, doc["dynamics_kind"], doc.get("meta", {})
