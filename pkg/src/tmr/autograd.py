"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` only when some input
requires a gradient; outside a tape everything runs as plain numpy. The tape
keeps nodes in creation order, so the backward sweep is just that list in
reverse.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_tape_stack: list["Tape"] = []
_scope_stack: list[str] = []

# instrumentation: full backward sweeps performed since import
COUNTERS = {"backward_calls": 0}


class NumericalError(FloatingPointError):
    """A non-finite value appeared; the message names the op and the layer scope."""


@contextlib.contextmanager
def scope(name):
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


def current_scope():
    return "/".join(_scope_stack) or "<top>"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable ops issued inside ``with Tape():``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def gradients(self, loss, seed=None):
        """Reverse sweep from ``loss``; returns ``{id(leaf): grad}`` for leaves."""
        if not self.nodes or loss._backward is None or not any(n is loss for n in self.nodes[::-1]):
            raise RuntimeError("backward called without a recorded forward for this loss")
        COUNTERS["backward_calls"] += 1
        g0 = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        pending = {id(loss): g0}
        leaves = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                store = leaves if parent._backward is None else pending
                key = id(parent)
                if key in store:
                    store[key] = store[key] + pg
                else:
                    store[key] = pg
        return leaves

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reached leaf."""
        leaves = self.gradients(loss)
        targets = params if params is not None else _leaf_index(self.nodes)
        for t in targets:
            g = leaves.get(id(t))
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
        return leaves


def _leaf_index(nodes):
    seen, out = set(), []
    for n in nodes:
        for p in n._parents:
            if p.requires_grad and p._backward is None and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def _finite(data, op):
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite output from {op} in {current_scope()}")


def _node(data, parents, backward, op):
    _finite(data, op)
    out = Tensor(data)
    if _tape_stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _tape_stack[-1].nodes.append(out)
    return out


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a):
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    inner = k * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = k * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), back, "gelu")


def sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = sigmoid_np(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def rows(a, n):
    """Leading ``n`` rows of a 2-D tensor (positional embeddings)."""
    full = a.shape

    def back(g):
        out = np.zeros(full)
        out[:n] = g
        return (out,)

    return _node(a.data[:n], (a,), back, "rows")


def gather(a, index):
    """``a[index]`` for an integer index tuple over leading axes."""
    full = a.shape

    def back(g):
        out = np.zeros(full)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), back, "gather")


def embedding(table, ids):
    ids = np.asarray(ids)
    full = table.shape

    def back(g):
        out = np.zeros(full)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, full[1]))
        return (out,)

    return _node(table.data[ids], (table,), back, "embedding")


# -- reductions --------------------------------------------------------------

def sum_all(a):
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a):
    n = a.data.size
    shape = a.shape
    return _node(np.array(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """``np.matmul`` semantics, including a 1-D right operand."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 1:
        def back(g):
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return ga, gb
    elif bd.ndim == 2 and ad.ndim > 2:
        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def back(g):
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _node(out, (a, b), back, "matmul")


# -- fused normalizers -------------------------------------------------------

def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a, additive_mask=None):
    """Softmax over the last axis; ``additive_mask`` is a constant added first."""
    x = a.data if additive_mask is None else a.data + additive_mask
    p = softmax_np(x)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), back, "softmax")


def log_softmax(a):
    lp = log_softmax_np(a.data)

    def back(g):
        return (g - np.exp(lp) * g.sum(axis=-1, keepdims=True),)

    return _node(lp, (a,), back, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        ggamma = (flat * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat.sum(axis=0)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), back, "layer_norm")


# -- losses ------------------------------------------------------------------

def pick(a, cols):
    """``a[i, cols[i]]`` for a 2-D tensor."""
    cols = np.asarray(cols)
    r = np.arange(a.shape[0])
    full = a.shape

    def back(g):
        out = np.zeros(full)
        out[r, cols] = g
        return (out,)

    return _node(a.data[r, cols], (a,), back, "pick")


def softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(z, is_original, valid):
    """Per-example mean token BCE where the positive class is *original*.

    ``z``: (B, n) logits of D = sigmoid(z); ``is_original``: (B, n) in {0, 1};
    ``valid``: (B, n) 0/1 mask of counted positions. Returns a (B,) tensor.
    """
    zd = z.data
    y = np.asarray(is_original, dtype=np.float64)
    m = np.asarray(valid, dtype=np.float64)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every example needs at least one counted position")
    per_tok = y * softplus_np(-zd) + (1.0 - y) * softplus_np(zd)
    out = (per_tok * m).sum(axis=1) / counts
    s = sigmoid_np(zd)

    def back(g):
        return ((g / counts)[:, None] * m * (s - y),)

    return _node(out, (z,), back, "bce_with_logits")
