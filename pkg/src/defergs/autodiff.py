"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the renderer and losses need are covered. A ``Var`` wraps
an ndarray and records how it was produced; ``backward`` walks the recorded
graph in reverse topological order and accumulates vector-Jacobian products.

Code written against plain numpy (ufuncs, ``.sum``, indexing, ``np.stack``,
``np.where``) runs unchanged on ``Var`` inputs, so the same shading and
blending functions serve both the gradient path and plain rendering.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

__all__ = [
    "Var",
    "backward",
    "value",
    "take",
    "scatter_add",
    "scatter_rows",
    "segment_sum",
    "cross",
    "norm",
    "exclusive_transmittance",
    "nan_to_zero",
    "stop_gradient",
]


def value(x):
    """Underlying ndarray of ``x`` (identity on arrays and scalars)."""
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """Differentiable array node."""

    __slots__ = ("value", "grad", "parents", "vjp")
    __array_priority__ = 1000

    def __init__(self, val, parents=(), vjp=None):
        self.value = np.asarray(val, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    # -- bookkeeping -------------------------------------------------------
    def _accum(self, g):
        # never mutate in place: the first gradient may alias another node's
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- arithmetic --------------------------------------------------------
    def __add__(self, o):
        return _add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return _add(self, _neg(o))

    def __rsub__(self, o):
        return _add(o, _neg(self))

    def __mul__(self, o):
        return _mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return _div(self, o)

    def __rtruediv__(self, o):
        return _div(o, self)

    def __neg__(self):
        return _neg(self)

    def __abs__(self):
        return _abs(self)

    def __pow__(self, p):
        return _pow(self, p)

    def __matmul__(self, o):
        return _matmul(self, o)

    def __rmatmul__(self, o):
        return _matmul(o, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # comparisons act on values and return plain boolean arrays
    def __gt__(self, o):
        return self.value > value(o)

    def __lt__(self, o):
        return self.value < value(o)

    def __ge__(self, o):
        return self.value >= value(o)

    def __le__(self, o):
        return self.value <= value(o)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.value.shape

        def vjp(g):
            self._accum(g.reshape(old))

        return Var(self.value.reshape(shape), (self,), vjp)

    def swapaxes(self, a, b):
        def vjp(g):
            self._accum(np.swapaxes(g, a, b))

        return Var(np.swapaxes(self.value, a, b), (self,), vjp)

    # -- numpy protocol ----------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        fn = _UFUNCS.get(ufunc)
        if fn is not None:
            return fn(*inputs)
        if ufunc in _PIECEWISE_CONSTANT:
            return ufunc(*[value(x) for x in inputs], **kwargs)
        raise TypeError(f"no derivative registered for np.{ufunc.__name__}")

    def __array_function__(self, func, types, args, kwargs):
        fn = _FUNCS.get(func)
        if fn is None:
            return NotImplemented
        return fn(*args, **kwargs)


def _lift(x):
    return x if isinstance(x, Var) else None


def _add(a, b):
    av, bv = value(a), value(b)
    out = av + bv

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g, np.shape(bv)))

    return Var(out, (a, b), vjp)


def _neg(a):
    if not isinstance(a, Var):
        return -a

    def vjp(g):
        a._accum(-g)

    return Var(-a.value, (a,), vjp)


def _mul(a, b):
    av, bv = value(a), value(b)

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g * bv, np.shape(av)))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g * av, np.shape(bv)))

    return Var(av * bv, (a, b), vjp)


def _div(a, b):
    av, bv = value(a), value(b)
    out = av / bv

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g / bv, np.shape(av)))
        if isinstance(b, Var):
            b._accum(_unbroadcast(-g * out / bv, np.shape(bv)))

    return Var(out, (a, b), vjp)


def _pow(a, p):
    if isinstance(p, Var):
        raise TypeError("only constant exponents are supported")
    av = a.value
    out = av ** p

    def vjp(g):
        a._accum(g * p * av ** (p - 1))

    return Var(out, (a,), vjp)


def _unary(fn, dfn):
    def op(a):
        if not isinstance(a, Var):
            return fn(a)
        av = a.value
        out = fn(av)

        def vjp(g):
            a._accum(g * dfn(av, out))

        return Var(out, (a,), vjp)

    return op


_exp = _unary(np.exp, lambda x, y: y)
_log = _unary(np.log, lambda x, y: 1.0 / x)
_sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
_abs = _unary(np.abs, lambda x, y: np.sign(x))
_sin = _unary(np.sin, lambda x, y: np.cos(x))
_cos = _unary(np.cos, lambda x, y: -np.sin(x))
_square = _unary(np.square, lambda x, y: 2.0 * x)


def _select(fn, pick_a):
    # maximum/minimum: gradient goes to the selected operand (ties -> first)
    def op(a, b):
        av, bv = value(a), value(b)
        out = fn(av, bv)
        mask = pick_a(av, bv)

        def vjp(g):
            if isinstance(a, Var):
                a._accum(_unbroadcast(np.where(mask, g, 0.0), np.shape(av)))
            if isinstance(b, Var):
                b._accum(_unbroadcast(np.where(mask, 0.0, g), np.shape(bv)))

        return Var(out, (a, b), vjp)

    return op


_maximum = _select(np.maximum, lambda a, b: a >= b)
_minimum = _select(np.minimum, lambda a, b: a <= b)


def _matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def vjp(g):
        if isinstance(a, Var):
            if bv.ndim == 1:
                ga = g[..., None] * bv
            else:
                ga = g @ np.swapaxes(bv, -1, -2) if av.ndim > 1 else (g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :]
            a._accum(_unbroadcast(ga, av.shape))
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = av[:, None] * g[..., None, :]
            elif bv.ndim == 1:
                gb = (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0]
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            b._accum(_unbroadcast(gb, bv.shape))

    return Var(out, (a, b), vjp)


def _sum(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, shape))

    return Var(out, (a,), vjp)


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def _getitem(a, idx):
    out = a.value[idx]
    shape = a.value.shape
    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return Var(out, (a,), vjp)


def _stack(arrays, axis=0):
    vals = [value(x) for x in arrays]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        for i, x in enumerate(arrays):
            if isinstance(x, Var):
                x._accum(np.take(g, i, axis=axis))

    return Var(out, tuple(arrays), vjp)


def _concatenate(arrays, axis=0):
    vals = [value(x) for x in arrays]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        for i, x in enumerate(arrays):
            if isinstance(x, Var):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                x._accum(g[tuple(sl)])

    return Var(out, tuple(arrays), vjp)


def _where(cond, a, b):
    cond = value(cond)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(np.where(cond, g, 0.0), np.shape(av)))
        if isinstance(b, Var):
            b._accum(_unbroadcast(np.where(cond, 0.0, g), np.shape(bv)))

    return Var(out, (a, b), vjp)


def _clip(a, lo, hi):
    av = value(a)
    out = np.clip(av, lo, hi)
    inside = (av >= (-np.inf if lo is None else lo)) & (av <= (np.inf if hi is None else hi))

    def vjp(g):
        a._accum(np.where(inside, g, 0.0))

    return Var(out, (a,), vjp)


def _np_sum(a, axis=None, keepdims=False, **_):
    return _sum(a, axis, keepdims)


_UFUNCS = {
    np.add: _add,
    np.subtract: lambda a, b: _add(a, _neg(b)),
    np.multiply: _mul,
    np.true_divide: _div,
    np.negative: _neg,
    np.power: _pow,
    np.exp: _exp,
    np.log: _log,
    np.sqrt: _sqrt,
    np.absolute: _abs,
    np.sin: _sin,
    np.cos: _cos,
    np.square: _square,
    np.maximum: _maximum,
    np.minimum: _minimum,
    np.matmul: _matmul,
}

# ufuncs whose result carries no gradient; applied to values
_PIECEWISE_CONSTANT = {
    np.greater, np.greater_equal, np.less, np.less_equal, np.equal, np.not_equal,
    np.isnan, np.isfinite, np.isinf, np.sign, np.signbit, np.floor, np.ceil, np.rint,
    np.logical_and, np.logical_or, np.logical_not,
}

_FUNCS = {
    np.sum: _np_sum,
    np.stack: _stack,
    np.concatenate: _concatenate,
    np.where: _where,
    np.clip: _clip,
}


# -- graph-level helpers ------------------------------------------------------

def scatter_add(idx, vals, n):
    """Rows of ``vals`` (F, ...) summed into ``n`` buckets given by ``idx`` (F,)."""
    idx = np.asarray(idx).ravel()
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n).astype(np.float64)
    flat = vals.reshape(len(idx), -1)
    # one sparse product beats a bincount per column
    M = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(M @ flat).reshape((n,) + vals.shape[1:])


def take(a, idx, axis=0):
    """Gather along ``axis``; the VJP scatters the gradient back."""
    if not isinstance(a, Var):
        return np.take(a, idx, axis=axis)
    av = a.value
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        if axis == 0:
            flat_idx = np.ravel(idx)
            full = scatter_add(flat_idx, g.reshape((flat_idx.size,) + av.shape[1:]), av.shape[0])
        else:
            full = np.zeros_like(av)
            sl = [slice(None)] * av.ndim
            sl[axis] = idx
            np.add.at(full, tuple(sl), g)
        a._accum(full)

    return Var(out, (a,), vjp)


def segment_sum(x, seg, n):
    """Sum rows of ``x`` (F, C) into ``n`` buckets given by ``seg`` (F,)."""
    xv = value(x)
    out = scatter_add(seg, xv, n)
    if not isinstance(x, Var):
        return out

    def vjp(g):
        x._accum(g[seg])

    return Var(out, (x,), vjp)


def scatter_rows(rows, idx, n):
    """Place ``rows`` (P, ...) at unique positions ``idx`` of a zero (n, ...) array."""
    rv = value(rows)
    out = np.zeros((n,) + rv.shape[1:])
    out[idx] = rv
    if not isinstance(rows, Var):
        return out

    def vjp(g):
        rows._accum(g[idx])

    return Var(out, (rows,), vjp)


def exclusive_transmittance(alpha):
    """T[..., k] = prod_{j<k} (1 - alpha[..., j]) along the last axis.

    Computed by the explicit recursion T_{k+1} = T_k (1 - alpha_k) so the
    values match a sequential front-to-back compositor bit for bit.
    """
    av = value(alpha)
    T = np.empty_like(av)
    T[..., 0] = 1.0
    for k in range(1, av.shape[-1]):
        T[..., k] = T[..., k - 1] * (1.0 - av[..., k - 1])
    if not isinstance(alpha, Var):
        return T

    def vjp(g):
        # dT_k/dalpha_j = -T_k / (1 - alpha_j) for j < k
        gt = g * T
        suffix = np.cumsum(gt[..., ::-1], axis=-1)[..., ::-1]
        later = np.zeros_like(suffix)
        later[..., :-1] = suffix[..., 1:]
        alpha._accum(-later / (1.0 - av))

    return Var(T, (alpha,), vjp)


def nan_to_zero(x):
    """Replace non-finite entries by 0 and block their gradient."""
    xv = value(x)
    bad = ~np.isfinite(xv)
    if not bad.any():
        return x
    if not isinstance(x, Var):
        return np.where(bad, 0.0, xv)
    return _where(bad, 0.0, x)


def cross(a, b):
    """Cross product along the last axis for arrays or ``Var``."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def norm(a, axis=-1, keepdims=False):
    return np.sqrt((a * a).sum(axis=axis, keepdims=keepdims))


def stop_gradient(x):
    return value(x)


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable Var."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is not None and node.grad is not None:
            node.vjp(node.grad)
