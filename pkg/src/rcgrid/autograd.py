"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every continuous quantity in the project (embeddings, logits, losses) lives in
a Tensor. The graph is recorded on the fly during the forward pass and walked
once in reverse topological order by backward(). All math is 64-bit and
single-threaded, so two identical runs produce bit-identical gradients.
"""

from __future__ import annotations

import math

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's contract."""


def _require(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _acc(t, v):
    """Accumulate gradient into t, allocating the buffer on first touch."""
    if t.grad is None:
        t.grad = np.array(v, dtype=np.float64)
    else:
        t.grad += v


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"

    def detach(self):
        return Tensor(self.data.copy())

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    """Record an op node when any parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- primitives ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, out):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, out):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require(a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2],
             "matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def backward(g, out):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _acc(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _acc(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g, out):
        _acc(a, g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g, out):
        _acc(a, np.transpose(g, inv))

    return _node(data, (a,), backward)


def take(a, idx):
    """Basic slicing / integer indexing. Duplicate advanced indices unsupported."""
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g, out):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _acc(a, buf)

    return _node(data, (a,), backward)


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    ref = [s for i, s in enumerate(parts[0].shape) if i != axis % parts[0].ndim]
    for p in parts[1:]:
        _require([s for i, s in enumerate(p.shape) if i != axis % p.ndim] == ref,
                 "concat", parts[0].shape, p.shape)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(p, g[tuple(sl)])

    return _node(data, parts, backward)


def tsum(a, axis=None):
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g, out):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(data, (a,), backward)


def tmean(a, axis=None):
    a = as_tensor(a)
    data = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g, out):
        if axis is None:
            _acc(a, np.broadcast_to(g / n, a.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape))

    return _node(data, (a,), backward)


def gelu(a):
    """GELU, tanh approximation (derivative matches the same approximation)."""
    a = as_tensor(a)
    x = a.data
    inner = SQRT_2_OVER_PI * (x + GELU_C * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g, out):
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x ** 2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        _acc(a, g * da)

    return _node(data, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    data = z

    def backward(g, out):
        y = data
        _acc(a, (g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _node(data, (a,), backward)


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)

    def backward(g, out):
        _acc(a, np.expand_dims(g, axis) * (e / s))

    return _node(data, (a,), backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    _require(gain.shape == (d,) and bias.shape == (d,), "layer_norm",
             a.shape, gain.shape, bias.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g, out):
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.shape))
        if a.requires_grad:
            gx = g * gain.data
            _acc(a, inv * (gx - gx.mean(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _node(data, (a, gain, bias), backward)


def embedding(table, ids):
    """Row lookup: table (V, D), integer ids of any shape -> (*ids.shape, D)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    _require(table.ndim == 2, "embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    data = table.data[ids]

    def backward(g, out):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(table, buf)

    return _node(data, (table,), backward)


def cross_entropy(logits, targets):
    """Mean cross-entropy of logits (..., C) against integer targets (...)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    _require(logits.shape[:-1] == targets.shape, "cross_entropy",
             logits.shape, targets.shape)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = max(targets.size, 1)
    data = -picked.sum() / n

    def backward(g, out):
        p = np.exp(logp)
        np.subtract.at(p.reshape(-1, p.shape[-1]),
                       (np.arange(targets.size), targets.reshape(-1)), 1.0)
        _acc(logits, g * p / n)

    return _node(data, (logits,), backward)


def squared_error(pred, target):
    """Mean squared error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _require(pred.shape == target.shape, "squared_error", pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(diff.size, 1)
    data = (diff ** 2).sum() / n

    def backward(g, out):
        if pred.requires_grad:
            _acc(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _acc(target, -g * 2.0 * diff / n)

    return _node(data, (pred, target), backward)


def cosine_similarity(a, b, eps=1e-12):
    """Cosine similarity along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape[-1] == b.shape[-1], "cosine_similarity", a.shape, b.shape)
    dot = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data ** 2).sum(axis=-1))
    nb = np.sqrt((b.data ** 2).sum(axis=-1))
    denom = np.maximum(na * nb, eps)
    data = dot / denom

    def backward(g, out):
        s = data
        if a.requires_grad:
            ga = b.data / denom[..., None] - (s / np.maximum(na ** 2, eps))[..., None] * a.data
            _acc(a, g[..., None] * ga)
        if b.requires_grad:
            gb = a.data / denom[..., None] - (s / np.maximum(nb ** 2, eps))[..., None] * b.data
            _acc(b, g[..., None] * gb)

    return _node(data, (a, b), backward)


def l2_normalize(a, eps=1e-12):
    """Unit-normalize along the last axis."""
    a = as_tensor(a)
    n = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    data = a.data / n

    def backward(g, out):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _acc(a, (g - data * dot) / n)

    return _node(data, (a,), backward)


def texp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g, out):
        _acc(a, g * data)

    return _node(data, (a,), backward)


def tlog(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g, out):
        _acc(a, g / a.data)

    return _node(data, (a,), backward)


# -- backward pass ------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss, params=None):
    """Backpropagate from a scalar loss.

    Accumulates .grad on every reachable tensor with requires_grad. When
    `params` (dict name -> Tensor) is given, returns {name: grad array} with
    zeros for parameters the loss does not depend on.
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)
    if params is not None:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    return None


def grad_check(fn, params, step=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `fn` maps the param dict to a scalar Tensor; `params` is {name: Tensor}.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    loss = fn(params)
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: non-finite function value")
    grads = backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(params).item()
            flat[i] = orig - step
            lo = fn(params).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise ValueError("grad_check: non-finite function value at perturbed point")
            numeric = (hi - lo) / (2.0 * step)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
