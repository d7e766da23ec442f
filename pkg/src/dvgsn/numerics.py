"""Small deterministic float64 kernel used by the model.

Everything here is a thin, shape-checked layer over numpy so that every
caller goes through one choke point with a fixed dtype and fixed summation
order (BLAS order is stable for fixed shapes in-process). The finite
difference checker at the bottom is the oracle for all gradients produced
elsewhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

# Floor for the L2 norm in center_unit_normalize; constant rows map to zero
# vectors instead of NaN.
NORM_EPS = 1e-8

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_matrix(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Elementwise x if x > 0 else alpha*(e^x - 1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def center_unit_normalize(x: np.ndarray) -> np.ndarray:
    """Subtract the mean, then divide by max(L2 norm, NORM_EPS).

    The output has zero mean and unit L2 norm, except for (near-)constant
    input where the norm floor returns an all-zero vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ShapeError("center_unit_normalize expects a vector of length >= 2")
    centered = x - x.mean()
    norm = float(np.linalg.norm(centered))
    return centered / max(norm, NORM_EPS)


def row_center_unit(x: np.ndarray) -> np.ndarray:
    """Row-wise center_unit_normalize for an n x d matrix."""
    x = as_matrix(x)
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    return centered / np.maximum(norms, NORM_EPS)


class Rng:
    """Seeded random source (PCG64): identical seed and call sequence give
    identical output on every platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, rows: int, cols: int, low: float, high: float) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols)).astype(np.float64)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def uniform_init(rng: Rng, rows: int, cols: int, fan_in: int) -> np.ndarray:
    """Uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)]; keeps pre-activation
    variance O(1) for sum-of-fan_in products."""
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(rows, cols, -bound, bound)


@dataclass
class AdamState:
    """Optimizer state for one parameter matrix."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One Adam update with bias correction. Mutates ``state`` and returns the
    updated parameter (a new array; ``param`` is left untouched)."""
    if param.shape != grad.shape:
        raise ShapeError(f"adam_step shape mismatch: param {param.shape} vs grad {grad.shape}")
    if state.m.shape != param.shape:
        raise ShapeError(f"adam_step state shape mismatch: {state.m.shape} vs {param.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_difference_check(f, analytic_grad: dict, theta: dict, h: float = 1e-5) -> float:
    """Compare analytic gradients against central differences, coordinate by
    coordinate, over a dict of named parameter matrices.

    ``f`` maps a theta-like dict to a scalar. Returns the maximum relative
    error, with denominators floored at 1e-8.
    """
    worst = 0.0
    for name, base in theta.items():
        base = np.asarray(base, dtype=np.float64)
        an = np.asarray(analytic_grad[name], dtype=np.float64)
        if an.shape != base.shape:
            raise ShapeError(f"gradient shape mismatch for {name}: {an.shape} vs {base.shape}")
        for idx in np.ndindex(base.shape):
            perturbed = {k: v.copy() for k, v in theta.items()}
            perturbed[name][idx] = base[idx] + h
            f_plus = float(f(perturbed))
            perturbed[name][idx] = base[idx] - h
            f_minus = float(f(perturbed))
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(
                    f"non-finite loss while perturbing {name}[{idx}]"
                )
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(fd), abs(float(an[idx])), 1e-8)
            worst = max(worst, abs(fd - float(an[idx])) / denom)
    return worst
