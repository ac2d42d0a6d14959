"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the surrogate needs are provided.  Every reduction runs
in a fixed order: graph aggregation goes through a CSR matrix whose rows list
incoming arcs by ascending arc id, and matrix products never take the
single-row BLAS path (whose rounding differs from the multi-row kernels).
Together these make a node's value independent of how many other rows share
the computation, which is what patched/full bit-equality rests on.
"""
from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

_counter = itertools.count()
_MIN_ROWS = 8


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-count independent ``a @ b`` for 2-D operands."""
    rows = a.shape[0]
    if rows < _MIN_ROWS:
        pad = np.zeros((_MIN_ROWS, a.shape[1]), dtype=a.dtype)
        pad[:rows] = a
        return (pad @ b)[:rows]
    return np.ascontiguousarray(a) @ b


def _row_sum(x: np.ndarray) -> np.ndarray:
    # einsum reduces each row on its own, in a fixed order, and is much
    # faster than ndarray.sum over a short last axis
    return np.einsum("ij->i", x)[:, None]


def _col_sum(g: np.ndarray) -> np.ndarray:
    """Column sums for gradients (backward only, where bit-exactness across row counts is not needed)."""
    return np.ones(g.shape[0], dtype=g.dtype) @ g if g.shape[0] else g.sum(axis=0)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "order")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.order = next(_counter)

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

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return divide(self, c)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value) -> Var:
    return Var(np.asarray(value), requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(np.asarray(value))


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _op(value, parents, backward_fn) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward_fn, True)
    return Var(value)


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _op(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Var:
    a = const(a)
    if isinstance(c, Var):
        raise TypeError("only scalar multiplication is supported")
    return _op(a.value * c, (a,), lambda g: (g * c,))


def divide(a, c: float) -> Var:
    a = const(a)
    return _op(a.value / c, (a,), lambda g: (g / c,))


def linear(x, w, b=None) -> Var:
    """``x @ w (+ b)``."""
    x, w = const(x), const(w)
    out = matmul(x.value, w.value)
    if b is None:
        return _op(out, (x, w), lambda g: (matmul(g, w.value.T), x.value.T @ g))
    b = const(b)
    return _op(
        out + b.value,
        (x, w, b),
        lambda g: (matmul(g, w.value.T), x.value.T @ g, _col_sum(g)),
    )


def add_bias(x, b) -> Var:
    x, b = const(x), const(b)
    return _op(x.value + b.value, (x, b), lambda g: (g, _col_sum(g)))


def relu(x) -> Var:
    x = const(x)
    mask = x.value > 0
    return _op(np.maximum(x.value, 0), (x,), lambda g: (g * mask,))


def _ln_forward(x, gamma, eps):
    inv_n = 1.0 / x.shape[1]
    xc = x - _row_sum(x) * inv_n
    inv = 1.0 / np.sqrt(_row_sum(xc * xc) * inv_n + eps)
    xc *= inv
    return xc, inv


def _ln_backward(g, gamma, xhat, inv):
    inv_n = 1.0 / xhat.shape[1]
    gx = g * gamma
    t = xhat * (_row_sum(gx * xhat) * inv_n)
    gx -= _row_sum(gx) * inv_n
    gx -= t
    gx *= inv
    return gx, _col_sum(g * xhat), _col_sum(g)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = const(x), const(gamma), const(beta)
    xhat, inv = _ln_forward(x.value, gamma.value, eps)
    return _op(
        xhat * gamma.value + beta.value,
        (x, gamma, beta),
        lambda g: _ln_backward(g, gamma.value, xhat, inv),
    )


def affine_sum(terms, b) -> Var:
    """``sum_i (x_i @ w_i)[index_i] + b`` accumulated left to right.

    ``terms`` holds ``(x, w, index, scatter)`` tuples; ``index`` is None for
    a plain product, otherwise ``scatter`` is the adjoint 0/1 matrix as in
    :func:`gather`.
    """
    b = const(b)
    terms = [(const(x), const(w), idx, sc) for x, w, idx, sc in terms]
    out = None
    for x, w, idx, _ in terms:
        y = matmul(x.value, w.value)
        if idx is not None:
            y = y[idx]
        if out is None:
            out = y
        else:
            out += y
    out += b.value

    def back(g):
        grads = []
        for x, w, idx, sc in terms:
            gy = g if idx is None else sc @ g
            grads.append(matmul(gy, w.value.T) if x.requires_grad else None)
            grads.append(x.value.T @ gy if w.requires_grad else None)
        grads.append(_col_sum(g))
        return grads

    parents = tuple(v for x, w, _, _ in terms for v in (x, w)) + (b,)
    return _op(out, parents, back)


def mlp_tail(t, layers, ln=None, eps: float = 1e-5) -> Var:
    """ReLU then affine for each ``(w, b)`` in ``layers``, then optional layer norm.

    ``t`` is the first layer's pre-activation; ``ln`` is ``(gamma, beta)``.
    """
    t = const(t)
    layers = [(const(w), const(b)) for w, b in layers]
    acts = []
    z = t.value
    for w, b in layers:
        h = np.maximum(z, 0)
        acts.append((z > 0, h))
        z = matmul(h, w.value)
        z += b.value
    if ln is not None:
        gamma, beta = const(ln[0]), const(ln[1])
        xhat, inv = _ln_forward(z, gamma.value, eps)
        out = xhat * gamma.value
        out += beta.value
    else:
        out = z

    def back(g):
        grads = []
        if ln is not None:
            g, gg, gb = _ln_backward(g, gamma.value, xhat, inv)
            grads = [gg, gb]
        for (w, b), (mask, h) in zip(reversed(layers), reversed(acts)):
            grads = [h.T @ g, _col_sum(g)] + grads
            g = matmul(g, w.value.T)
            g *= mask
        return [g] + grads

    parents = (t,) + tuple(v for wb in layers for v in wb)
    if ln is not None:
        parents += (gamma, beta)
    return _op(out, parents, back)


def standardize(x, mean: np.ndarray, std: np.ndarray) -> Var:
    x = const(x)
    return _op((x.value - mean) / std, (x,), lambda g: (g / std,))


def destandardize(x, mean: np.ndarray, std: np.ndarray) -> Var:
    x = const(x)
    return _op(x.value * std + mean, (x,), lambda g: (g * std,))


def gather(x, index: np.ndarray, scatter: sp.csr_matrix) -> Var:
    """Rows ``x[index]``; ``scatter`` is the (len(x) x len(index)) 0/1 matrix for the adjoint."""
    x = const(x)
    return _op(x.value[index], (x,), lambda g: (scatter @ g,))


def segment_sum(x, agg: sp.csr_matrix, index: np.ndarray) -> Var:
    """Ordered per-receiver sums ``agg @ x``; ``index`` maps each row of ``x`` to its segment."""
    x = const(x)
    return _op(agg @ x.value, (x,), lambda g: (g[index],))


def sum_squared_error(x, target: np.ndarray, rows: np.ndarray | None = None) -> Var:
    """Scalar sum of squared errors, optionally restricted to a set of rows."""
    x = const(x)
    diff = x.value - target
    if rows is None:
        val = np.sum(diff * diff)

        def back(g):
            return (2.0 * g * diff,)

    else:
        d = diff[rows]
        val = np.sum(d * d)

        def back(g):
            out = np.zeros_like(diff)
            out[rows] = 2.0 * g * d
            return (out,)

    return _op(np.asarray(val), (x,), back)


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root . seed)/d(leaf) into ``leaf.grad`` for every leaf parameter."""
    if not root.requires_grad:
        return
    if seed is None:
        seed = np.ones_like(root.value)
    nodes = []
    seen = {id(root)}
    stack = [root]
    while stack:
        v = stack.pop()
        nodes.append(v)
        for p in v.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda v: v.order, reverse=True)
    grads = {id(root): np.asarray(seed, dtype=root.value.dtype)}
    for v in nodes:
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, pg in zip(v.parents, v.backward_fn(g)):
            if not p.requires_grad or pg is None:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
