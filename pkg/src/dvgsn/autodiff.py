"""Minimal reverse-mode tape over float64 arrays.

Just enough operations for this model's loss: matrix products, ELU,
row-wise center+unit normalization, a masked Gram product, row-sliced
squared error, and a squared Frobenius norm. Nodes hold whole matrices, so
the tape for one training step is a few dozen entries and the backward
sweep costs about two forward passes.

Gradients produced here are validated against
:func:`dvgsn.numerics.finite_difference_check` in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .numerics import NORM_EPS


class Var:
    """One tape node: a value, an accumulated gradient, and a backward rule."""

    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def accumulate(self, delta):
        if self.grad is None:
            self.grad = np.array(delta, dtype=np.float64, copy=True) if isinstance(delta, np.ndarray) else float(delta)
        else:
            self.grad = self.grad + delta


def constant(value: np.ndarray) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def leaf(value: np.ndarray) -> Var:
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True)


def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    out = Var(a.value @ b.value, parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)

    out.vjp = vjp
    return out


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value, parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    out.vjp = vjp
    return out


def elu(a: Var) -> Var:
    x = a.value
    out_val = np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))
    out = Var(out_val, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            # d elu/dx = 1 for x > 0, e^x = elu(x) + 1 otherwise
            a.accumulate(g * np.where(x > 0.0, 1.0, out_val + 1.0))

    out.vjp = vjp
    return out


def row_center_unit(a: Var) -> Var:
    """Per row: subtract the mean, divide by max(L2 norm, NORM_EPS)."""
    x = a.value
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    floored = np.maximum(norms, NORM_EPS)
    z = centered / floored
    out = Var(z, parents=(a,))

    def vjp(g):
        if not a.requires_grad:
            return
        free = norms > NORM_EPS
        zdotg = np.sum(z * g, axis=1, keepdims=True)
        g_centered = np.where(free, (g - z * zdotg) / floored, g / NORM_EPS)
        a.accumulate(g_centered - g_centered.mean(axis=1, keepdims=True))

    out.vjp = vjp
    return out


def gram_masked(z: Var, mask: np.ndarray) -> Var:
    """T = (Z Z^T) * mask with a constant 0/1 mask (not necessarily symmetric)."""
    m = np.asarray(mask, dtype=np.float64)
    zv = z.value
    if m.shape != (zv.shape[0], zv.shape[0]):
        raise ShapeError(f"mask shape {m.shape} does not match {zv.shape[0]} nodes")
    out = Var((zv @ zv.T) * m, parents=(z,))

    def vjp(g):
        if z.requires_grad:
            gm = g * m
            z.accumulate(gm @ zv + gm.T @ zv)

    out.vjp = vjp
    return out


def sse_rows(yhat: Var, rows: np.ndarray, y: np.ndarray) -> Var:
    """Sum of squared errors over the selected rows against constant targets."""
    rows = np.asarray(rows, dtype=np.intp)
    diff = yhat.value[rows] - y
    out = Var(float(np.sum(diff * diff)), parents=(yhat,))

    def vjp(g):
        if yhat.requires_grad:
            full = np.zeros_like(yhat.value)
            full[rows] = (2.0 * g) * diff
            yhat.accumulate(full)

    out.vjp = vjp
    return out


def frob_sq(a: Var) -> Var:
    out = Var(float(np.sum(a.value * a.value)), parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a.accumulate((2.0 * g) * a.value)

    out.vjp = vjp
    return out


def scalar_mix(terms, coeffs) -> Var:
    """Weighted sum of scalar Vars."""
    value = sum(c * t.value for t, c in zip(terms, coeffs))
    out = Var(float(value), parents=tuple(terms))

    def vjp(g):
        for t, c in zip(terms, coeffs):
            if t.requires_grad:
                t.accumulate(c * g)

    out.vjp = vjp
    return out


def _topo_order(root: Var):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Var):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if not np.isscalar(root.value) and np.asarray(root.value).ndim != 0:
        raise ShapeError("backward expects a scalar root")
    root.accumulate(1.0)
    for node in reversed(_topo_order(root)):
        if node.vjp is not None and node.grad is not None:
            node.vjp(node.grad)
