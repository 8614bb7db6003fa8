"""Reverse-mode differentiation over numpy arrays.

A Tape records array operations as they execute; backward() replays the tape
in reverse to compute vector-Jacobian products. Every public math function in
this module accepts either plain ndarrays (in which case it evaluates in
numpy directly) or Var handles (in which case the op is recorded). Code
written against these functions therefore runs identically with and without
gradient tracking, which keeps recorded primals bitwise equal to the plain
evaluation.

One tape per thread of execution; tapes are not thread-safe.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, UnsupportedPrimitive

_TINY = 1e-40  # smooth guard added under square roots on the unit-norm path


class Tape:
    """Topologically ordered op recording. Owner-scoped, replayable."""

    def __init__(self):
        self.values = []    # primal value per node
        self.parents = []   # per node: list of (parent_node_index, vjp callable)
        self.inputs = None  # set by record()
        self.outputs = None

    def _node(self, value, parents):
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        return Var(self, idx)

    def var(self, value):
        """Create a leaf variable holding `value`."""
        return self._node(_as_float(value), [])

    def gradient(self, outputs, inputs, seeds=None):
        """Vector-Jacobian product: gradients of seeded outputs w.r.t. inputs."""
        if isinstance(outputs, Var):
            outputs = [outputs]
        if isinstance(inputs, Var):
            inputs = [inputs]
        if seeds is None:
            seeds = [np.ones_like(o.value) for o in outputs]
        elif isinstance(seeds, (int, float, np.ndarray)):
            seeds = [np.asarray(seeds)]
        adj = [None] * len(self.values)
        for o, s in zip(outputs, seeds):
            s = np.asarray(s, dtype=o.value.dtype)
            if s.shape != o.value.shape:
                raise ShapeMismatch(
                    f"seed shape {s.shape} does not match output shape {o.value.shape}")
            adj[o.idx] = s if adj[o.idx] is None else adj[o.idx] + s
        for idx in range(len(self.values) - 1, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            for pidx, vjp in self.parents[idx]:
                pg = vjp(g)
                adj[pidx] = pg if adj[pidx] is None else adj[pidx] + pg
        return [adj[v.idx] if adj[v.idx] is not None
                else np.zeros_like(v.value) for v in inputs]


class Var:
    """Handle to one tape node. Arithmetic only between Vars of one tape."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # keep numpy from silently consuming Vars

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape})"

    # operators delegate to the dispatching module functions
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, key): return getitem(self, key)


def value_of(x):
    """Primal value of a Var, or the input itself for plain arrays."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise UnsupportedPrimitive("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_float(value):
    """Floats keep their precision; anything else becomes float64."""
    a = np.asarray(value)
    return a if a.dtype in (np.float32, np.float64) else a.astype(np.float64)


def _record(tape, value, *parent_vjps):
    parents = [(v.idx, fn) for v, fn in parent_vjps if isinstance(v, Var)]
    return tape._node(_as_float(value), parents)


# --- elementwise binary ---

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if tape is None:
        return out
    return _record(tape, out,
                   (a, lambda g, s=np.shape(av): _unbroadcast(g, s)),
                   (b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if tape is None:
        return out
    return _record(tape, out,
                   (a, lambda g, s=np.shape(av): _unbroadcast(g, s)),
                   (b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    return _record(tape, out,
                   (a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s)),
                   (b, lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s)))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    return _record(tape, out,
                   (a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g / o, s)),
                   (b, lambda g, n=av, o=bv, s=np.shape(bv):
                       _unbroadcast(-g * n / (o * o), s)))


def neg(a):
    tape = _tape_of(a)
    out = -value_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a, lambda g: -g))


def power(a, p):
    if isinstance(p, Var):
        raise UnsupportedPrimitive("only constant exponents are supported")
    tape = _tape_of(a)
    av = value_of(a)
    out = av ** p
    if tape is None:
        return out
    return _record(tape, out, (a, lambda g, x=av: g * p * x ** (p - 1)))


def absolute(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.abs(av)
    if tape is None:
        return out
    return _record(tape, out, (a, lambda g, s=np.sign(av): g * s))


# --- elementwise unary / transcendental ---

def _unary(a, fn, dfn):
    tape = _tape_of(a)
    av = value_of(a)
    out = fn(av)
    if tape is None:
        return out
    return _record(tape, out, (a, lambda g, x=av, o=out: g * dfn(x, o)))


def sin(a):
    return _unary(a, np.sin, lambda x, o: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, o: -np.sin(x))


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, o: 0.5 / o)


def exp(a):
    return _unary(a, np.exp, lambda x, o: o)


def log(a):
    return _unary(a, np.log, lambda x, o: 1.0 / x)


def tanh(a):
    return _unary(a, np.tanh, lambda x, o: 1.0 - o * o)


def logistic(a):
    """Standard logistic 1 / (1 + exp(-x))."""
    def f(x):
        return 0.5 * (np.tanh(0.5 * x) + 1.0)
    return _unary(a, f, lambda x, o: o * (1.0 - o))


def leaky_relu(a, slope=0.1):
    def f(x):
        return np.where(x >= 0.0, x, slope * x)
    return _unary(a, f, lambda x, o: np.where(x >= 0.0, 1.0, slope).astype(x.dtype))


def softplus(a, beta=1.0):
    def f(x):
        # overflow-safe: softplus(x) = max(x,0) + log1p(exp(-|x|))
        return np.maximum(beta * x, 0.0) / beta + np.log1p(np.exp(-np.abs(beta * x))) / beta
    return _unary(a, f, lambda x, o: 0.5 * (np.tanh(0.5 * beta * x) + 1.0))


def smooth_clamp_min(a, lo, beta=200.0):
    """Softplus-based lower clamp: smooth, ~= max(a, lo) away from lo."""
    return add(softplus(sub(a, lo), beta), lo)


def atan2(y, x):
    tape = _tape_of(y, x)
    yv, xv = value_of(y), value_of(x)
    out = np.arctan2(yv, xv)
    if tape is None:
        return out
    r2 = xv * xv + yv * yv
    return _record(tape, out,
                   (y, lambda g, s=np.shape(yv): _unbroadcast(g * xv / r2, s)),
                   (x, lambda g, s=np.shape(xv): _unbroadcast(-g * yv / r2, s)))


# --- linear algebra / structure ---

def _swap(m):
    return np.swapaxes(m, -1, -2)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ShapeMismatch("matmul requires operands with ndim >= 2")
    out = av @ bv
    if tape is None:
        return out
    return _record(tape, out,
                   (a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g @ _swap(o), s)),
                   (b, lambda g, o=av, s=np.shape(bv): _unbroadcast(_swap(o) @ g, s)))


def sum_(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out

    def vjp(g, shape=av.shape):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()
    return _record(tape, out, (a, vjp))


def mean_(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def max_(a, axis=None):
    """Max reduction; gradient routes to the first argmax (deterministic)."""
    tape = _tape_of(a)
    av = value_of(a)
    out = np.max(av, axis=axis)
    if tape is None:
        return out

    def vjp(g, x=av):
        z = np.zeros_like(x)
        if axis is None:
            z.flat[np.argmax(x)] = g
        else:
            idx = np.expand_dims(np.argmax(x, axis=axis), axis)
            np.put_along_axis(z, idx, np.expand_dims(g, axis), axis=axis)
        return z
    return _record(tape, out, (a, vjp))


def getitem(a, key):
    tape = _tape_of(a)
    av = value_of(a)
    out = av[key]
    if tape is None:
        return out

    def vjp(g, shape=av.shape):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, key, g)
        return z
    return _record(tape, np.array(out), (a, vjp))


def reshape(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.reshape(av, shape)
    if tape is None:
        return out
    return _record(tape, out, (a, lambda g, s=av.shape: np.reshape(g, s)))


def transpose(a, axes):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.transpose(av, axes)
    if tape is None:
        return out
    inv = np.argsort(axes)
    return _record(tape, out, (a, lambda g: np.transpose(g, inv)))


def broadcast_to(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.broadcast_to(av, shape)
    if tape is None:
        return out
    return _record(tape, out.copy(), (a, lambda g, s=av.shape: _unbroadcast(g, s)))


def stack(seq, axis=0):
    seq = list(seq)
    tape = _tape_of(*seq)
    vals = [value_of(a) for a in seq]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    parents = []
    for i, a in enumerate(seq):
        parents.append((a, lambda g, i=i: np.take(g, i, axis=axis)))
    return _record(tape, out, *parents)


def concat(seq, axis=-1):
    seq = list(seq)
    tape = _tape_of(*seq)
    vals = [value_of(a) for a in seq]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, a in enumerate(seq):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]
        parents.append((a, vjp))
    return _record(tape, out, *parents)


def dropout(a, p, rng, active):
    """Inverted dropout as a recorded mask multiply; identity when inactive."""
    if not active or p <= 0.0:
        return a
    av = value_of(a)
    mask = ((rng.random(np.shape(av)) >= p) / (1.0 - p)).astype(av.dtype)
    return mul(a, mask)


# --- small 3D helpers used by the kinematics code ---

def dot3(a, b):
    return sum_(mul(a, b)) if isinstance(a, Var) or isinstance(b, Var) \
        else np.sum(value_of(a) * value_of(b))


def cross3(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        a, b = np.asarray(a), np.asarray(b)
        return np.array([a[1] * b[2] - a[2] * b[1],
                         a[2] * b[0] - a[0] * b[2],
                         a[0] * b[1] - a[1] * b[0]])
    ax, ay, az = getitem(a, 0), getitem(a, 1), getitem(a, 2)
    bx, by, bz = getitem(b, 0), getitem(b, 1), getitem(b, 2)
    return stack([sub(mul(ay, bz), mul(az, by)),
                  sub(mul(az, bx), mul(ax, bz)),
                  sub(mul(ax, by), mul(ay, bx))])


def norm3(a):
    if not isinstance(a, Var):
        a = np.asarray(a)
        return np.sqrt(np.sum(a * a) + _TINY)  # same op order as recorded path
    return sqrt(add(dot3(a, a), _TINY))


def unit3(a):
    if not isinstance(a, Var):
        a = np.asarray(a)
        return a / np.sqrt(np.sum(a * a) + _TINY)
    return div(a, norm3(a))


# --- recording / checking API ---

def record(f, inputs):
    """Run f on tape-tracked copies of `inputs`; return (outputs, tape).

    The recorded primal outputs equal the plain evaluation bitwise because
    both paths execute the same numpy calls.
    """
    tape = Tape()
    in_vars = [tape.var(x) for x in inputs]
    out = f(*in_vars)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    for o in outs:
        if not isinstance(o, Var):
            raise UnsupportedPrimitive("recorded function must return Vars")
    tape.inputs = in_vars
    tape.outputs = list(outs)
    if isinstance(out, (tuple, list)):
        return out, tape
    return out, tape


def backward(tape, seed):
    """Vector-Jacobian product for a tape produced by record()."""
    if tape.outputs is None:
        raise UnsupportedPrimitive("tape was not produced by record()")
    if not isinstance(seed, (tuple, list)):
        seed = [seed]
    seeds = [np.broadcast_to(np.asarray(s, dtype=np.float64), o.value.shape)
             if np.ndim(s) == 0 else np.asarray(s, dtype=np.float64)
             for s, o in zip(seed, tape.outputs)]
    return tape.gradient(tape.outputs, tape.inputs, seeds)


def finite_diff_check(f, x, h=1e-4):
    """Worst relative error between reverse-mode and central differences.

    f must be scalar-valued and composed of this module's primitives so it can
    run both recorded and plain. Relative error uses an absolute floor of 1e-8.
    """
    x = np.asarray(x, dtype=np.float64)
    out, tape = record(lambda v: f(v), [x])
    g = backward(tape, 1.0)[0]
    fd = np.zeros_like(x)
    flat = fd.reshape(-1)
    xflat = x.copy().reshape(-1)
    for i in range(xflat.size):
        xp = xflat.copy()
        xm = xflat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(value_of(f(xp.reshape(x.shape))))
        fm = float(value_of(f(xm.reshape(x.shape))))
        flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(g - fd) / denom))
