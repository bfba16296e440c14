"""Tape-based reverse-mode differentiation over a small operator set.

Usage::

    with Graph() as g:
        loss = ops...            # every op on a Var is recorded on g
    g.backward(loss)             # leaf Vars get .grad (accumulated)

Outside an active Graph the same functions only compute values, which is
the inference fast path.
"""
from __future__ import annotations

import threading

import numpy as np

from . import tensor as K

_local = threading.local()


def _stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph() -> "Graph | None":
    s = _stack()
    return s[-1] if s else None


class Var:
    """An ndarray value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_graph")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._graph = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def __add__(self, o): return add(self, o)
    __radd__ = __add__
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    __rmul__ = __mul__
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)


def value(x):
    return x.data if isinstance(x, Var) else x


class Graph:
    """Records op applications; backward replays them in reverse."""

    def __init__(self):
        self.tape = []
        self.grads = {}
        self._retain = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)

    def record(self, out: Var, parents, backward):
        out._graph = self
        self.tape.append((out, parents, backward))

    def retain(self, v: Var):
        """Keep the gradient reaching an intermediate v (leaves are always kept)."""
        self._retain.add(id(v))
        return v

    def release(self):
        """Drop the tape and stored gradients so the forward buffers can be freed."""
        for out, _, _ in self.tape:
            out._graph = None
        self.tape, self.grads, self._retain = [], {}, set()

    def backward(self, root: Var, seed=None, accumulate=True):
        """Propagate from root. A non-scalar root needs an explicit seed."""
        if not isinstance(root, Var) or root._graph is not self:
            raise RuntimeError("backward called on a value that was not produced by a forward pass on this graph")
        if seed is None:
            if root.data.size != 1:
                raise ValueError(f"loss must be scalar, got shape {root.shape}; pass a seed for vector roots")
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=root.data.dtype)
        if seed.shape != root.shape:
            raise ValueError(f"seed shape {seed.shape} != root shape {root.shape}")
        self.grads = {}
        grads = {id(root): seed}
        leaves = {}
        for out, parents, fn in reversed(self.tape):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if id(out) in self._retain:
                self.grads[id(out)] = g
            pgs = fn(g)
            for p, pg in zip(parents, pgs):
                if pg is None or not isinstance(p, Var) or not p.requires_grad:
                    continue
                if p._graph is None:
                    leaves[id(p)] = p
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg
        for k, p in leaves.items():
            g = grads.pop(k)
            self.grads[k] = g
            if accumulate:
                p.grad = g.copy() if p.grad is None else p.grad + g
        return self

    def grad(self, v: Var):
        """Gradient reaching a leaf or retained v during the last backward (None if unreached)."""
        return self.grads.get(id(v))


def make(out, parents, backward) -> Var:
    g = active_graph()
    v = Var(out)
    if g is not None and any(isinstance(p, Var) and p.requires_grad for p in parents):
        v.requires_grad = True
        g.record(v, parents, backward)
    return v


def _same(a, b, op):
    if np.ndim(a) and np.ndim(b) and np.shape(a) != np.shape(b):
        raise ValueError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)} (no broadcasting)")


# elementwise ---------------------------------------------------------------

def add(a, b):
    ad, bd = value(a), value(b)
    _same(ad, bd, "add")
    return make(ad + bd, (a, b), lambda g: (g, g))


def sub(a, b):
    ad, bd = value(a), value(b)
    _same(ad, bd, "sub")
    return make(ad - bd, (a, b), lambda g: (g, -g))


def mul(a, b):
    ad, bd = value(a), value(b)
    _same(ad, bd, "mul")
    return make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    ad, bd = value(a), value(b)
    _same(ad, bd, "div")
    return make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a, c: float):
    return make(value(a) * c, (a,), lambda g: (g * c,))


def log(a):
    ad = value(a)
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def power(a, k: float):
    ad = value(a)
    return make(ad ** k, (a,), lambda g: (g * k * ad ** (k - 1),))


def sigmoid(a):
    ad = value(a)
    y = (1.0 / (1.0 + np.exp(-ad.astype(np.float64)))).astype(ad.dtype)
    return make(y, (a,), lambda g: (g * y * (1 - y),))


def clip(a, lo, hi):
    ad = value(a)
    inside = (ad >= lo) & (ad <= hi)
    return make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def total(a):
    """Sum of all elements (scalar)."""
    ad = value(a)
    return make(np.asarray(ad.sum(dtype=np.float64), ad.dtype), (a,),
                lambda g: (np.full(ad.shape, g, ad.dtype),))


def mean(a):
    return scale(total(a), 1.0 / value(a).size)


def stack(xs):
    xs = list(xs)
    vals = [value(x) for x in xs]
    return make(np.stack(vals), tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))))


def concat(xs, axis):
    xs = list(xs)
    vals = [value(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))
    return make(np.concatenate(vals, axis=axis), tuple(xs), back)


def slice_axis(a, axis, start, stop):
    ad = value(a)
    idx = [slice(None)] * ad.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        out = np.zeros_like(ad)
        out[idx] = g
        return (out,)
    return make(ad[idx].copy(), (a,), back)


def crop(a, margin: int):
    """Remove `margin` pixels from each side of the last two axes."""
    ad = value(a)
    idx = (Ellipsis, slice(margin, ad.shape[-2] - margin), slice(margin, ad.shape[-1] - margin))

    def back(g):
        out = np.zeros_like(ad)
        out[idx] = g
        return (out,)
    return make(ad[idx].copy(), (a,), back)


def crop_to(a, h, w):
    """Keep the top-left h x w window of the last two axes."""
    ad = value(a)

    def back(g):
        out = np.zeros_like(ad)
        out[..., :h, :w] = g
        return (out,)
    return make(ad[..., :h, :w].copy(), (a,), back)


def reshape(a, shape):
    ad = value(a)
    return make(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def time_mean(a):
    """Mean over the leading (time) axis."""
    ad = value(a)
    t = ad.shape[0]
    return make(ad.mean(axis=0, dtype=np.float64).astype(ad.dtype), (a,),
                lambda g: (np.broadcast_to(g / t, ad.shape).astype(ad.dtype),))


# spatial -------------------------------------------------------------------

def _flat(x):
    """Merge [T,B,...] into [T*B,...] for kernels that take 4-D input."""
    return x.reshape(-1, *x.shape[-3:]) if x.ndim == 5 else x


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    xd, wd = value(x), value(w)
    bd = None if b is None else value(b)
    lead = xd.shape[:-3]
    x4 = _flat(xd)
    g = active_graph()
    keep = g is not None and isinstance(w, Var) and w.requires_grad
    res = K.conv_forward(x4, wd, bd, stride, padding, dilation, groups, keep_cols=keep)
    y, cols = res if keep else (res, None)
    y = y.reshape(*lead, *y.shape[1:])

    def back(gy):
        need_x = isinstance(x, Var) and x.requires_grad
        need_w = isinstance(w, Var) and w.requires_grad
        gx, gw, gb = K.conv_backward(_flat(gy), x4, wd, stride, padding, dilation, groups,
                                     need_x=need_x, need_w=need_w, cols=cols)
        if gx is not None:
            gx = gx.reshape(xd.shape)
        return gx, gw, gb
    return make(y, (x, w, b), back)


def upsample(x, factor: int):
    xd = value(x)
    return make(K.nearest_upsample(xd, factor), (x,), lambda g: (K.nearest_upsample_grad(g, factor),))


def resize(x, out_h, out_w):
    xd = value(x)
    h, w = xd.shape[-2:]
    return make(K.bilinear_resize(xd, out_h, out_w), (x,), lambda g: (K.bilinear_resize_grad(g, h, w),))


def batch_norm(x, gamma, beta, lam, eps, training, running=None, momentum=0.9):
    """Per-channel normalization over every axis except the channel axis (-3).

    Training mode uses batch statistics and, if `running` (mean, var arrays)
    is given, updates it in place: r = momentum*r + (1-momentum)*batch.
    Eval mode uses the running statistics.
    """
    xd, gd, bd = value(x), value(gamma), value(beta)
    axes = tuple(i for i in range(xd.ndim) if i != xd.ndim - 3)
    bshape = [1] * xd.ndim
    bshape[-3] = xd.shape[-3]
    x64 = xd.astype(np.float64)
    if training:
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        if running is not None:
            n = xd.size // xd.shape[-3]
            unbiased = var * n / max(n - 1, 1)
            running[0][...] = momentum * running[0] + (1 - momentum) * mu
            running[1][...] = momentum * running[1] + (1 - momentum) * unbiased
    else:
        mu, var = running[0].astype(np.float64), running[1].astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu.reshape(bshape)) * inv.reshape(bshape)
    g64 = gd.astype(np.float64).reshape(bshape)
    y = (lam * g64 * xhat + bd.astype(np.float64).reshape(bshape)).astype(xd.dtype)

    def back(gy):
        gy64 = gy.astype(np.float64)
        ggamma = (lam * (gy64 * xhat).sum(axis=axes)).astype(gd.dtype)
        gbeta = gy64.sum(axis=axes).astype(bd.dtype)
        gxhat = gy64 * lam * g64
        if training:
            gx = inv.reshape(bshape) * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(xd.dtype), ggamma, gbeta
    return make(y, (x, gamma, beta), back)


# checking ------------------------------------------------------------------

def grad_check(fn, inputs, eps=1e-3, n_coords=20, seed=0, seed_grad=None):
    """Max relative error between analytic and central-difference gradients.

    fn maps a list of Vars to a Var. A non-scalar output is reduced with a
    fixed random cotangent. Inputs are promoted to float64; n_coords
    coordinates per input are sampled (all if the input is smaller).
    """
    rng = np.random.default_rng(seed)
    xs = [Var(np.asarray(x, np.float64), requires_grad=True) for x in inputs]
    with Graph() as g:
        out = fn(xs)
    if seed_grad is None:
        seed_grad = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    g.backward(out, seed=seed_grad)

    def f(vals):
        return float((value(fn([Var(v) for v in vals])) * seed_grad).sum())

    worst = 0.0
    for k, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat_idx = np.arange(x.data.size)
        if x.data.size > n_coords:
            flat_idx = rng.choice(x.data.size, n_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, x.data.shape)
            vals = [v.data.copy() for v in xs]
            vals[k][idx] += eps
            fp = f(vals)
            vals[k][idx] -= 2 * eps
            fm = f(vals)
            num = (fp - fm) / (2 * eps)
            err = abs(analytic[idx] - num) / max(1e-8, abs(num))
            worst = max(worst, float(err))
    return worst
