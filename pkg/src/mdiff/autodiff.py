"""Minimal reverse-mode tape over numpy arrays.

The training path needs gradients through the transition-kernel algebra
(matrix exponentials, the matrix-fraction solve, Cholesky factors) and a
small feed-forward score model. The operator set is deliberately small and
fixed; every function here dispatches on its arguments, so code written
against this module runs unchanged on plain ndarrays (returning ndarrays)
or on :class:`Var` leaves (building the tape).
"""

from __future__ import annotations

import numpy as np

from . import matops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation graph wrapping an ndarray (or scalar)."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuple of (Var, vjp_fn)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # arithmetic
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Unwrap a Var (or pass a plain array through)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _lift(fwd, *args, vjps):
    """Build a Var from forward value and one vjp per Var argument."""
    parents = tuple((a, v) for a, v in zip(args, vjps) if isinstance(a, Var))
    return Var(fwd, parents)


def add(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, float) + np.asarray(b, float)
    av, bv = value(a), value(b)
    return _lift(av + bv, a, b, vjps=(
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, float) - np.asarray(b, float)
    av, bv = value(a), value(b)
    return _lift(av - bv, a, b, vjps=(
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, float) * np.asarray(b, float)
    av, bv = value(a), value(b)
    return _lift(av * bv, a, b, vjps=(
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, float) / np.asarray(b, float)
    av, bv = value(a), value(b)
    return _lift(av / bv, a, b, vjps=(
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))


def power(a, p):
    if not is_var(a):
        return np.asarray(a, float) ** p
    av = value(a)
    return _lift(av ** p, a, vjps=(lambda g: g * p * av ** (p - 1),))


def matmul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, float) @ np.asarray(b, float)
    av, bv = value(a), value(b)

    def grad_a(g):
        if av.ndim == 1:  # (n,) @ (n, p) -> (p,)
            return bv @ g if bv.ndim == 2 else g * bv
        if bv.ndim == 1:  # (..., m, n) @ (n,) -> (..., m)
            return _unbroadcast(g[..., :, None] * bv[None, :], av.shape)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def grad_b(g):
        if bv.ndim == 1:
            if av.ndim == 1:
                return g * av
            return _unbroadcast((np.swapaxes(av, -1, -2) @ g[..., :, None])[..., 0],
                                bv.shape)
        if av.ndim == 1:  # (n,) @ (n, p)
            return np.outer(av, g)
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _lift(av @ bv, a, b, vjps=(grad_a, grad_b))


def transpose(a):
    if value(a).ndim < 2:  # matches numpy's .T on vectors
        return a
    if not is_var(a):
        return np.swapaxes(np.asarray(a, float), -1, -2)
    av = value(a)
    return _lift(np.swapaxes(av, -1, -2), a,
                 vjps=(lambda g: np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    if not is_var(a):
        return np.asarray(a, float).reshape(shape)
    av = value(a)
    return _lift(av.reshape(shape), a, vjps=(lambda g: g.reshape(av.shape),))


def getitem(a, idx):
    if not is_var(a):
        return np.asarray(a, float)[idx]
    av = value(a)

    def grad(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _lift(av[idx], a, vjps=(grad,))


def concat(parts, axis=0):
    if not any(is_var(p) for p in parts):
        return np.concatenate([np.asarray(p, float) for p in parts], axis=axis)
    vals = [value(p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    fwd = np.concatenate(vals, axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * fwd.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    parents = tuple((p, make_vjp(i)) for i, p in enumerate(parts) if is_var(p))
    return Var(fwd, parents)


def diag(v):
    """Embed a vector as a diagonal matrix (or extract nothing else)."""
    if not is_var(v):
        return np.diag(np.asarray(v, float))
    vv = value(v)
    return _lift(np.diag(vv), v, vjps=(lambda g: np.diagonal(g).copy(),))


def diag_part(a):
    if not is_var(a):
        return np.diagonal(np.asarray(a, float)).copy()
    av = value(a)

    def grad(g):
        out = np.zeros_like(av)
        np.fill_diagonal(out, g)
        return out

    return _lift(np.diagonal(av).copy(), a, vjps=(grad,))


def _elementwise(a, fn, dfn):
    if not is_var(a):
        return fn(np.asarray(a, float))
    av = value(a)
    return _lift(fn(av), a, vjps=(lambda g: g * dfn(av),))


def exp(a):
    return _elementwise(a, np.exp, np.exp)


def log(a):
    return _elementwise(a, np.log, lambda x: 1.0 / x)


def sqrt(a):
    return _elementwise(a, np.sqrt, lambda x: 0.5 / np.sqrt(x))


def tanh(a):
    return _elementwise(a, np.tanh, lambda x: 1.0 - np.tanh(x) ** 2)


def sin(a):
    return _elementwise(a, np.sin, np.cos)


def cos(a):
    return _elementwise(a, np.cos, lambda x: -np.sin(x))


def asum(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.asarray(a, float).sum(axis=axis, keepdims=keepdims)
    av = value(a)
    fwd = av.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _lift(fwd, a, vjps=(grad,))


def amean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(asum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def trace(a):
    return asum(diag_part(a))


def expm(a):
    """Matrix exponential; vjp is the Frechet-derivative adjoint."""
    if not is_var(a):
        return matops.expm(a)
    av = value(a)
    return _lift(matops.expm(av), a,
                 vjps=(lambda g: matops.expm_frechet(av.T, g),))


def cholesky(a):
    """Lower-Cholesky factor (PSD-tolerant forward, PD backward recurrence)."""
    if not is_var(a):
        return matops.cholesky_psd(a)
    av = value(a)
    lower = matops.cholesky_psd(av)

    def grad(g):
        # standard triangular backward: Sigma_bar = L^{-T} Phi(L^T g) L^{-1}
        p = np.tril(lower.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        tmp = np.linalg.solve(lower.T, p)
        out = np.linalg.solve(lower.T, tmp.T).T
        return 0.5 * (out + out.T)

    return _lift(lower, a, vjps=(grad,))


def solve(a, b):
    """Solve ``a @ x = b`` (b may be 1-D or 2-D)."""
    if not (is_var(a) or is_var(b)):
        return np.linalg.solve(np.asarray(a, float), np.asarray(b, float))
    av, bv = value(a), value(b)
    x = np.linalg.solve(av, bv)

    def grad_a(g):
        gb = np.linalg.solve(av.T, g)
        if bv.ndim == 1:
            return -np.outer(gb, x)
        return -gb @ x.T

    def grad_b(g):
        return np.linalg.solve(av.T, g)

    return _lift(x, a, b, vjps=(grad_a, grad_b))


def backward(out: Var, seed=None) -> None:
    """Accumulate ``.grad`` on every node reachable from ``out``."""
    topo: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, float)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contrib


def grad(out: Var, leaves) -> list:
    """Gradient of a scalar ``out`` with respect to ``leaves``."""
    backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves]
