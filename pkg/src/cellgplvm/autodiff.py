"""Minimal reverse-mode automatic differentiation over numpy arrays.

The training objective only needs a small, fixed operation set: broadcast
arithmetic, matmul, reductions, a few elementwise transcendentals, slicing,
Cholesky and triangular solves.  Keeping the tape this small means every
adjoint can be (and is) checked against central finite differences.

Matrix-calculus adjoints:
  * Cholesky follows Iain Murray, "Differentiation of the Cholesky
    decomposition" (2016), symmetric convention.
  * solve_triangular uses the standard inverse-function adjoints with the
    result restricted to the stored triangle.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .exceptions import IllConditionedMatrixError

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        value = np.asarray(value, dtype=np.float64)
        if not value.flags["C_CONTIGUOUS"]:
            value = np.ascontiguousarray(value)  # keeps 0-d shapes intact
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple of parent grads

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        """Matrix transpose: swaps the last two axes (not numpy's full .T)."""
        return swap_last(self)

    def item(self):
        return float(self.value)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Graph leaf that never receives gradient accumulation."""
    return Tensor(x)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return Tensor(out, (a, b), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def sin(a):
    a = as_tensor(a)
    return Tensor(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    return Tensor(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    return Tensor(out, (a,), lambda g: (g * expit(a.value),))


# -- shape ops ---------------------------------------------------------------


def take(a, key):
    a = as_tensor(a)
    out = a.value[key]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return Tensor(out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor(
        np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def swap_last(a):
    a = as_tensor(a)
    return Tensor(
        np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value @ b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return (ga, gb)

    return Tensor(out, (a, b), vjp)


def diag_part(a):
    a = as_tensor(a)
    out = np.diagonal(a.value, axis1=-2, axis2=-1).copy()

    def vjp(g):
        full = np.zeros_like(a.value)
        idx = np.arange(a.shape[-1])
        full[..., idx, idx] = g
        return (full,)

    return Tensor(out, (a,), vjp)


def diag_embed(v):
    v = as_tensor(v)
    m = v.shape[-1]
    out = np.zeros(v.shape + (m,))
    idx = np.arange(m)
    out[..., idx, idx] = v.value

    def vjp(g):
        return (g[..., idx, idx],)

    return Tensor(out, (v,), vjp)


# -- linear algebra ----------------------------------------------------------


def chol_with_jitter(matrix, name="matrix"):
    """Plain-numpy Cholesky with an escalating jitter ladder.

    Returns (L, delta) for the smallest delta in JITTER_LADDER such that
    matrix + delta*I factors; raises IllConditionedMatrixError otherwise.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    eye = np.eye(matrix.shape[-1])
    for delta in JITTER_LADDER:
        try:
            return np.linalg.cholesky(matrix + delta * eye), delta
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedMatrixError(
        f"{name} is not positive definite even with jitter {JITTER_LADDER[-1]:g}"
    )


def _phi(x):
    """Lower triangle with the diagonal halved (Murray's Phi operator)."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a, name="matrix"):
    """L = chol(A + delta*I) with the smallest workable jitter.

    The adjoint is insensitive to the jitter shift and assumes A is used
    as a symmetric matrix (gradient returned symmetrized).
    """
    a = as_tensor(a)
    lower, _delta = chol_with_jitter(a.value, name=name)

    def vjp(g):
        p = _phi(lower.T @ g)
        tmp = solve_triangular(lower, p, lower=True, trans="T")  # L^-T P
        s = solve_triangular(lower, tmp.T, lower=True, trans="T").T  # L^-T P L^-1
        return ((s + s.T) * 0.5,)

    return Tensor(lower, (a,), vjp)


def tri_solve(l, b, trans=False):
    """Solve L x = b (trans=False) or L^T x = b (trans=True); L lower."""
    l, b = as_tensor(l), as_tensor(b)
    out = solve_triangular(l.value, b.value, lower=True, trans="T" if trans else "N")

    def vjp(g):
        gb = solve_triangular(
            l.value, g, lower=True, trans="N" if trans else "T"
        )
        if trans:
            gl = -np.tril(out @ gb.T if out.ndim > 1 else np.outer(out, gb))
        else:
            gl = -np.tril(gb @ out.T if out.ndim > 1 else np.outer(gb, out))
        return (gl, gb)

    return Tensor(out, (l, b), vjp)


# -- backward driver ---------------------------------------------------------


def backward(root):
    """Accumulate gradients of the scalar `root` into every graph leaf."""
    if root.value.size != 1:
        raise ValueError("backward() expects a scalar root")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if parent.grad is None:
                parent.grad = g.copy() if isinstance(g, np.ndarray) else g
            else:
                parent.grad = parent.grad + g
