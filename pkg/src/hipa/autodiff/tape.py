"""Reverse-mode differentiation on a Wengert tape.

Nodes are appended in evaluation order, which is a topological order, so the
backward sweep simply walks the list in reverse. Only nodes that depend on a
``requires_grad`` leaf are recorded; everything else is a constant.
"""
from __future__ import annotations

import numpy as np

from hipa.edges import filter3x3 as _filter3x3


class Var:
    __slots__ = ("value", "tape", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, tape, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    def __init__(self):
        self.nodes = []

    def variable(self, value, name=None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, True, name)
        self.nodes.append(v)
        return v

    def constant(self, value, name=None) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, False, name)

    def record(self, value, parents, backward_fn) -> Var:
        rg = any(p.requires_grad for p in parents)
        v = Var(value, self, rg)
        if rg:
            v.parents = parents
            v.backward_fn = backward_fn
            self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> "Adjoints":
        if np.size(loss.value) != 1:
            raise ValueError(f"backward needs a scalar loss node, got shape {loss.shape}")
        adj = {}
        if loss.requires_grad:
            adj[id(loss)] = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None) if node.backward_fn is not None else adj.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return Adjoints(adj)


class Adjoints:
    """Leaf adjoints; unreachable or constant nodes read back as zeros."""

    def __init__(self, table):
        self._table = table

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._table.get(id(var))
        return np.zeros_like(var.value) if g is None else g

    def named(self, variables: dict) -> dict:
        return {k: self[v] for k, v in variables.items()}


def backward(tape: Tape, loss: Var, wrt: dict | None = None):
    """Run the reverse sweep; with ``wrt`` return a name -> gradient dict."""
    adj = tape.backward(loss)
    return adj if wrt is None else adj.named(wrt)


# --------------------------------------------------------------------------
# helpers

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def lift(x, tape) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b):
    tape = _tape_of(a, b)
    return lift(a, tape), lift(b, tape), tape


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Var:
    a, b, tape = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b, tape = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b, tape = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def div(a, b) -> Var:
    a, b, tape = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(out, (a, b),
                       lambda g: (_unbroadcast(g / bv, np.shape(av)),
                                  _unbroadcast(-g * out / bv, np.shape(bv))))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * g * v,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (0.5 * g / out,))


def absolute(a: Var) -> Var:
    v = a.value
    return a.tape.record(np.abs(v), (a,), lambda g: (g * np.sign(v),))


def hypot(a: Var, b: Var) -> Var:
    """sqrt(a^2 + b^2) with the zero subgradient at the origin."""
    av, bv = a.value, b.value
    r = np.sqrt(av * av + bv * bv)
    safe = np.where(r > 0, r, 1.0)
    nz = r > 0

    def bw(g):
        s = np.where(nz, g / safe, 0.0)
        return s * av, s * bv

    return a.tape.record(r, (a, b), bw)


def leaky_relu(a: Var, slope: float = 0.1) -> Var:
    v = a.value
    pos = v > 0
    return a.tape.record(np.where(pos, v, slope * v), (a,), lambda g: (np.where(pos, g, slope * g),))


# --------------------------------------------------------------------------
# shape and reduction

def reduce_sum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def reduce_mean(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape
    n = np.size(a.value) if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return a.tape.record(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(np.reshape(a.value, shape), (a,), lambda g: (np.reshape(g, old),))


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Var, idx) -> Var:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx], (a,), bw)


def concat(xs, axis=0) -> Var:
    tape = _tape_of(*xs)
    xs = [lift(x, tape) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape.record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Var:
    """2-D matrix product."""
    a, b, tape = _binary(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# --------------------------------------------------------------------------
# image primitives, layout (..., H, W)

def _edge_pad_adjoint(g, before, after):
    """Adjoint of ``np.pad(mode='edge')`` on the last two axes."""
    for ax, (b, e) in zip((-2, -1), zip(before, after)):
        n = g.shape[ax] - b - e
        g = np.moveaxis(g, ax, 0)
        core = g[b:b + n].copy()
        if b:
            core[0] += g[:b].sum(axis=0)
        if e:
            core[-1] += g[b + n:].sum(axis=0)
        g = np.moveaxis(core, 0, ax)
    return g


def filter3x3(a: Var, kernel) -> Var:
    """Fixed-kernel correlation with replicate padding (see hipa.edges)."""
    k = np.asarray(kernel, dtype=np.float64).reshape(3, 3)
    h, w = a.shape[-2:]

    def bw(g):
        dp = np.zeros(g.shape[:-2] + (h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dp[..., i:i + h, j:j + w] += k[i, j] * g
        return (_edge_pad_adjoint(dp, (1, 1), (1, 1)),)

    return a.tape.record(_filter3x3(a.value, k), (a,), bw)


def avgpool2(a: Var) -> Var:
    """2x2 mean pooling; odd sides are edge-padded first (ceil mode)."""
    h, w = a.shape[-2:]
    eh, ew = h % 2, w % 2
    x = a.value
    if eh or ew:
        x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, eh), (0, ew)], mode="edge")
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    out = x.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (_edge_pad_adjoint(up, (0, 0), (eh, ew)) if (eh or ew) else up,)

    return a.tape.record(out, (a,), bw)


def avgpool2_nhwc(a: Var) -> Var:
    n, h, w, c = a.shape
    out = a.value.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return a.tape.record(out, (a,), bw)


def upsample2_nhwc(a: Var) -> Var:
    n, h, w, c = a.shape

    def bw(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return a.tape.record(np.repeat(np.repeat(a.value, 2, axis=1), 2, axis=2), (a,), bw)


def upsample2(a: Var) -> Var:
    """Nearest-neighbour 2x upsampling."""
    lead = a.shape[:-2]
    h, w = a.shape[-2:]

    def bw(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return a.tape.record(np.repeat(np.repeat(a.value, 2, axis=-2), 2, axis=-1), (a,), bw)


def spectral_filter(a: Var, weights) -> Var:
    """Re(IFFT(FFT(x) * M)) over the last two axes for a real mask that is even
    under frequency negation; such a filter is its own adjoint."""
    m = np.asarray(weights, dtype=np.float64)

    def f(x):
        return np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * m, axes=(-2, -1)).real

    return a.tape.record(f(a.value), (a,), lambda g: (f(g),))


def _im2col(xp, h, w):
    """(N, H+2, W+2, C) padded -> (N*H*W, 9*C), tap-major then channel."""
    n, c = xp.shape[0], xp.shape[-1]
    cols = np.empty((n, h, w, 9, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _conv_taps(xv, wv, need_dx, need_dw):
    """Per-tap form: one product over the padded grid, then shifted sums.
    Cheaper than im2col when output channels are fewer than input channels."""
    n, h, w, c = xv.shape
    o = wv.shape[0]
    xf = np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
    wall = wv.transpose(1, 2, 3, 0).reshape(c, 9 * o)
    y = (xf @ wall).reshape(n, h + 2, w + 2, 9, o)
    out = np.zeros((n, h, w, o))
    for i in range(3):
        for j in range(3):
            out += y[:, i:i + h, j:j + w, 3 * i + j, :]

    def bw(g):
        gc = np.zeros((n, h + 2, w + 2, 9, o))
        for i in range(3):
            for j in range(3):
                gc[:, i:i + h, j:j + w, 3 * i + j, :] = g
        gf = gc.reshape(-1, 9 * o)
        dw = (xf.T @ gf).reshape(c, 3, 3, o).transpose(3, 0, 1, 2) if need_dw else None
        dx = (gf @ wall.T).reshape(n, h + 2, w + 2, c)[:, 1:-1, 1:-1] if need_dx else None
        return dx, dw

    return out, bw


def _conv_im2col(xv, wv, need_dx, need_dw):
    n, h, w, c = xv.shape
    o = wv.shape[0]
    cols = _im2col(np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0))), h, w)
    wm = wv.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = (cols @ wm.T).reshape(n, h, w, o)

    def bw(g):
        gm = g.reshape(n * h * w, o)
        dw = (gm.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2) if need_dw else None
        dx = None
        if need_dx:
            # adjoint of a zero-padded correlation: correlate with the
            # spatially flipped kernel, channels swapped
            wf = wv[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, 9 * o)
            dx = (_im2col(np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0))), h, w) @ wf.T).reshape(n, h, w, c)
        return dx, dw

    return out, bw


def conv2d(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """Multi-channel 3x3 convolution (correlation), zero padding, stride 1,
    channels-last.

    x: (N, H, W, C); weight: (O, C, 3, 3); bias: (O,). Returns (N, H, W, O).
    """
    tape = _tape_of(x, weight)
    x, weight = lift(x, tape), lift(weight, tape)
    xv, wv = x.value, weight.value
    if xv.ndim != 4 or wv.shape[1] != xv.shape[-1] or wv.shape[2:] != (3, 3):
        raise ValueError(f"conv2d shape mismatch: input {xv.shape}, weight {wv.shape}")
    impl = _conv_taps if wv.shape[0] < wv.shape[1] else _conv_im2col
    out, conv_bw = impl(xv, wv, x.requires_grad, weight.requires_grad)
    parents = (x, weight)
    if bias is not None:
        bias = lift(bias, tape)
        out = out + bias.value
        parents = (x, weight, bias)

    def bw(g):
        grads = conv_bw(g)
        if bias is not None:
            grads = grads + (g.reshape(-1, g.shape[-1]).sum(axis=0),)
        return grads

    return tape.record(out, parents, bw)
