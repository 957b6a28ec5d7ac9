"""Small dense-tensor engine with reverse-mode differentiation.

Every value is a float64 numpy array wrapped in :class:`Tensor`. Operations
record their parents and a backward rule; :func:`backward` walks the recorded
graph in reverse topological order and accumulates gradients additively.
"""

from __future__ import annotations

import contextlib

import numpy as np

LAYER_NORM_EPS = 1e-5
GROUP_NORM_EPS = 1e-5

_grad_enabled = True


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (inference, validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.op = op
        return out
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), back, "mul")


def absolute(x):
    x = as_tensor(x)
    s = np.sign(x.data)

    def back(g):
        return (g * s,)

    return _node(np.abs(x.data), (x,), back, "abs")


def square(x):
    x = as_tensor(x)
    xd = x.data

    def back(g):
        return (2.0 * g * xd,)

    return _node(xd * xd, (x,), back, "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _node(x.data.transpose(axes), (x,), back, "transpose")


def swapaxes(x, a1, a2):
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def narrow(x, start, stop, axis=-1):
    """Contiguous slice ``[start, stop)`` along one axis."""
    x = as_tensor(x)
    shape = x.shape
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(x.data[index], (x,), back, "narrow")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    widths = [x.shape[axis] for x in xs]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    return _node(data, tuple(xs), back, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # shared weight: contract all leading positions in one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(out, (a, b), back, "matmul")


def rotate_pairs(x, cos, sin):
    """``x * cos + swap(x) * sin`` with ``swap(a, b) = (-b, a)`` per feature pair."""
    x = as_tensor(x)
    xd = x.data
    if xd.shape[-1] % 2:
        raise DimensionError(f"pair rotation needs an even width, got {xd.shape}")

    def swap(v):
        out = np.empty_like(v)
        out[..., 0::2] = -v[..., 1::2]
        out[..., 1::2] = v[..., 0::2]
        return out

    def back(g):
        gs = g * sin
        # adjoint of swap: (u, w) -> (w, -u)
        gx = g * cos
        gx[..., 0::2] += gs[..., 1::2]
        gx[..., 1::2] -= gs[..., 0::2]
        return (_unbroadcast(gx, xd.shape),)

    return _node(xd * cos + swap(xd) * sin, (x,), back, "rotate")


def pointwise_linear(x, w, bias=None):
    """Affine map of the last axis, i.e. a 1x1 convolution over every position."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"pointwise_linear: input {x.shape} vs weight {w.shape}")
    out = matmul(x, w)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), back, "relu")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), back, "sigmoid")


def silu(x):
    """x * sigmoid(x); also serves as the beta=1 Swish gate."""
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)

    def back(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _node(xd * s, (x,), back, "silu")


def softmax_rows(x):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# normalization


def _normalize_last(x, eps):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), back, "normalize")


def layer_norm(x, gain=None, bias=None, eps=LAYER_NORM_EPS):
    out = _normalize_last(x, eps)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def group_norm(x, groups, gain=None, bias=None, eps=GROUP_NORM_EPS):
    """Normalize contiguous feature groups of the last axis separately."""
    x = as_tensor(x)
    f = x.shape[-1]
    if groups < 1 or f % groups:
        raise ConfigError(f"feature width {f} is not divisible into {groups} groups")
    lead = x.shape[:-1]
    out = _normalize_last(reshape(x, lead + (groups, f // groups)), eps)
    out = reshape(out, lead + (f,))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root):
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


def backward(loss):
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls until reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


def gradcheck(fn, params, probes=None, step=1e-5, rng=None):
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    ``probes`` random (param, index) entries are checked; ``None`` checks all.
    Returns the largest relative error seen.
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    entries = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if probes is not None and probes < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=probes, replace=False)
        entries = [entries[k] for k in pick]

    worst = 0.0
    with no_grad():
        for i, idx in entries:
            p = params[i]
            orig = p.data[idx]
            p.data[idx] = orig + step
            up = float(fn().data)
            p.data[idx] = orig - step
            down = float(fn().data)
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[i][idx]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
