"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op accepts a mix of Var nodes and plain ndarrays; when no Var is
involved the op short-circuits to plain numpy, so the same forward code
serves both the float32 codec path and the float64 training path.  The tape
is implicit: each node stores its Var parents and a closure computing their
gradients, and `backward` walks nodes in reverse topological order.

Adjoint coverage is tracked through a registry of self-checking cases
(`register_check`); `finite_difference_check` compares each case's reverse
accumulated gradients against central finite differences in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Var:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.value.shape

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


def val(x):
    return x.value if isinstance(x, Var) else x


def _node(out, srcs, grads_fn):
    """Wrap `out` in a Var unless every source is a constant.

    grads_fn(g) must return one gradient per source (None where a source is
    a constant); constants are filtered out of the stored parent tuple.
    """
    parents = tuple(s for s in srcs if isinstance(s, Var))
    if not parents:
        return out

    def bwd(g):
        return [gg for s, gg in zip(srcs, grads_fn(g)) if isinstance(s, Var)]

    return Var(out, parents, bwd)


def custom(out, srcs, grads_fn):
    """Public hook for composite ops with handwritten adjoints."""
    return _node(out, srcs, grads_fn)


def _unbroadcast(g, shape):
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    out = val(a) + val(b)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, np.shape(val(a))), _unbroadcast(g, np.shape(val(b)))))


def sub(a, b):
    out = val(a) - val(b)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, np.shape(val(a))), _unbroadcast(-g, np.shape(val(b)))))


def mul(a, b):
    va, vb = val(a), val(b)
    out = va * vb
    return _node(out, (a, b), lambda g: (_unbroadcast(g * vb, np.shape(va)), _unbroadcast(g * va, np.shape(vb))))


def div(a, b):
    va, vb = val(a), val(b)
    out = va / vb
    return _node(
        out, (a, b),
        lambda g: (_unbroadcast(g / vb, np.shape(va)), _unbroadcast(-g * va / (vb * vb), np.shape(vb))),
    )


def matmul(a, b):
    va, vb = val(a), val(b)
    out = va @ vb
    return _node(out, (a, b), lambda g: (g @ vb.T, va.T @ g))


def relu(x):
    v = val(x)
    out = np.maximum(v, 0)
    return _node(out, (x,), lambda g: (g * (v > 0),))


def sigmoid(x):
    out = expit(val(x))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(val(x))
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x):
    v = val(x)
    out = np.logaddexp(0.0, v)
    return _node(out, (x,), lambda g: (g * expit(v),))


def log(x):
    v = val(x)
    out = np.log(v)
    return _node(out, (x,), lambda g: (g / v,))


def exp(x):
    out = np.exp(val(x))
    return _node(out, (x,), lambda g: (g * out,))


def clip(x, lo, hi):
    v = val(x)
    out = np.clip(v, lo, hi)
    return _node(out, (x,), lambda g: (g * ((v > lo) & (v < hi)),))


def maximum(x, floor):
    """Elementwise max against a constant floor."""
    v = val(x)
    out = np.maximum(v, floor)
    return _node(out, (x,), lambda g: (g * (v > floor),))


def asum(x, axis=None):
    v = val(x)
    out = v.sum(axis=axis)

    def grads(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

    return _node(out, (x,), grads)


def take_rows(x, idx):
    v = val(x)
    idx = np.asarray(idx)
    out = v[idx]

    def grads(g):
        gx = np.zeros_like(v)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), grads)


def scatter_rows(x, pos, n_rows):
    """Place rows of x at unique positions `pos` in a zero matrix."""
    v = val(x)
    out = np.zeros((n_rows, v.shape[1]), dtype=v.dtype)
    out[pos] = v
    return _node(out, (x,), lambda g: (g[pos],))


def concat_cols(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    splits = np.cumsum([v.shape[1] for v in vals])[:-1]

    def grads(g):
        return tuple(np.split(g, splits, axis=1))

    return _node(out, tuple(parts), grads)


def concat_rows(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    splits = np.cumsum([v.shape[0] for v in vals])[:-1]

    def grads(g):
        return tuple(np.split(g, splits, axis=0))

    return _node(out, tuple(parts), grads)


def slice_cols(x, a, b):
    v = val(x)
    out = v[:, a:b]

    def grads(g):
        gx = np.zeros_like(v)
        gx[:, a:b] = g
        return (gx,)

    return _node(out, (x,), grads)


def index0(x, i):
    """Select one slice along the first axis (e.g. one channel's matrix)."""
    v = val(x)
    out = v[i]

    def grads(g):
        gx = np.zeros_like(v)
        gx[i] = g
        return (gx,)

    return _node(out, (x,), grads)


def backward(root: Var):
    """Accumulate gradients of a scalar root into every reachable Var."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    for node in topo:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.bwd is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.bwd(node.grad)):
            if g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# Adjoint self-checks.  Each entry builds (params, forward) where params is a
# dict of float64 leaf Vars and forward() rebuilds the scalar loss from their
# current values; the checker perturbs leaves elementwise.

ADJOINT_CHECKS: dict[str, callable] = {}


def register_check(name):
    def deco(fn):
        ADJOINT_CHECKS[name] = fn
        return fn

    return deco


def leaf(rng, *shape, scale=1.0, offset=0.0):
    return Var(rng.standard_normal(shape) * scale + offset)


def finite_difference_check(build, rng=None, h=1e-4):
    """Max relative error between reverse-mode and central-difference grads."""
    params, forward = build(rng if rng is not None else np.random.default_rng(0))
    loss = forward()
    backward(loss)
    worst = 0.0
    for p in params.values():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.value)
        g_ad = np.asarray(g_ad, dtype=np.float64).reshape(-1)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(val(forward()))
            flat[i] = orig - h
            down = float(val(forward()))
            flat[i] = orig
            g_fd = (up - down) / (2.0 * h)
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-4)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst


def _project(x, rng):
    """Random fixed projection to a scalar so every output element matters."""
    r = rng.standard_normal(val(x).shape)
    return asum(mul(x, r))


@register_check("add")
def _check_add(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 3)
    return {"a": a, "b": b}, lambda: _project(add(a, b), np.random.default_rng(1))


@register_check("sub")
def _check_sub(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
    return {"a": a, "b": b}, lambda: _project(sub(a, b), np.random.default_rng(2))


@register_check("mul")
def _check_mul(rng):
    a, b = leaf(rng, 5, 2), leaf(rng, 5, 2)
    return {"a": a, "b": b}, lambda: _project(mul(a, b), np.random.default_rng(3))


@register_check("div")
def _check_div(rng):
    a = leaf(rng, 4, 2)
    b = Var(rng.standard_normal((4, 2)) + 3.0)
    return {"a": a, "b": b}, lambda: _project(div(a, b), np.random.default_rng(4))


@register_check("matmul")
def _check_matmul(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 2)
    return {"a": a, "b": b}, lambda: _project(matmul(a, b), np.random.default_rng(5))


@register_check("relu")
def _check_relu(rng):
    # Keep inputs away from the kink so finite differences are valid.
    v = rng.standard_normal((6, 3))
    v = np.where(np.abs(v) < 0.05, 0.5, v)
    x = Var(v)
    return {"x": x}, lambda: _project(relu(x), np.random.default_rng(6))


@register_check("sigmoid")
def _check_sigmoid(rng):
    x = leaf(rng, 5, 2)
    return {"x": x}, lambda: _project(sigmoid(x), np.random.default_rng(7))


@register_check("tanh")
def _check_tanh(rng):
    x = leaf(rng, 5, 2)
    return {"x": x}, lambda: _project(tanh(x), np.random.default_rng(8))


@register_check("softplus")
def _check_softplus(rng):
    x = leaf(rng, 5, 2)
    return {"x": x}, lambda: _project(softplus(x), np.random.default_rng(9))


@register_check("log")
def _check_log(rng):
    x = Var(rng.random((4, 3)) + 0.5)
    return {"x": x}, lambda: _project(log(x), np.random.default_rng(10))


@register_check("exp")
def _check_exp(rng):
    x = leaf(rng, 4, 3, scale=0.5)
    return {"x": x}, lambda: _project(exp(x), np.random.default_rng(11))


@register_check("clip")
def _check_clip(rng):
    v = rng.standard_normal((6, 2)) * 2.0
    v = np.where(np.abs(np.abs(v) - 1.0) < 0.05, 0.3, v)
    x = Var(v)
    return {"x": x}, lambda: _project(clip(x, -1.0, 1.0), np.random.default_rng(12))


@register_check("maximum")
def _check_maximum(rng):
    v = rng.standard_normal((6, 2))
    v = np.where(np.abs(v - 0.1) < 0.05, 0.4, v)
    x = Var(v)
    return {"x": x}, lambda: _project(maximum(x, 0.1), np.random.default_rng(13))


@register_check("sum")
def _check_sum(rng):
    x = leaf(rng, 4, 3)
    return {"x": x}, lambda: _project(asum(x, axis=0), np.random.default_rng(14))


@register_check("take_rows")
def _check_take_rows(rng):
    x = leaf(rng, 6, 3)
    idx = np.array([0, 2, 2, 5, 1])
    return {"x": x}, lambda: _project(take_rows(x, idx), np.random.default_rng(15))


@register_check("scatter_rows")
def _check_scatter_rows(rng):
    x = leaf(rng, 4, 3)
    pos = np.array([5, 0, 3, 1])
    return {"x": x}, lambda: _project(scatter_rows(x, pos, 7), np.random.default_rng(16))


@register_check("concat_cols")
def _check_concat_cols(rng):
    a, b = leaf(rng, 4, 2), leaf(rng, 4, 3)
    return {"a": a, "b": b}, lambda: _project(concat_cols([a, b]), np.random.default_rng(17))


@register_check("concat_rows")
def _check_concat_rows(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    return {"a": a, "b": b}, lambda: _project(concat_rows([a, b]), np.random.default_rng(18))


@register_check("slice_cols")
def _check_slice_cols(rng):
    x = leaf(rng, 4, 5)
    return {"x": x}, lambda: _project(slice_cols(x, 1, 4), np.random.default_rng(19))


@register_check("index0")
def _check_index0(rng):
    x = leaf(rng, 3, 4, 2)
    return {"x": x}, lambda: _project(index0(x, 1), np.random.default_rng(23))
