"""Simplex primitives: stable softmax, KL divergence and finite-difference checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

SIMPLEX_TOL = 1e-9


class InvalidInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax logits must be finite")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def is_simplex(p, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(p.ndim == 1 and p.size > 0 and np.all(p >= 0) and abs(p.sum() - 1.0) <= tol)


def kl_div(p, q) -> float:
    """KL(p || q) with 0*log(0/q) = 0; p_j > 0 with q_j = 0 gives inf."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: p has shape {p.shape}, q has shape {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - np.log(q[support]))))


def kl_div_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL over the last axis; q must be strictly positive (softmax output)."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_div_rows: p has shape {p.shape}, q has shape {q.shape}")
    safe = np.where(p > 0, p, 1.0)
    return np.sum(np.where(p > 0, p * (np.log(safe) - np.log(q)), 0.0), axis=-1)


def kl_grad_wrt_logits(g, logits) -> np.ndarray:
    """Gradient of KL(g || softmax(logits)) with respect to the logits: softmax(logits) - g."""
    g = np.asarray(g, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if g.shape != z.shape:
        raise ShapeError(f"kl_grad_wrt_logits: g has shape {g.shape}, logits have shape {z.shape}")
    return softmax(z, axis=-1) - g


class GradientCheckError(ArithmeticError):
    pass


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    x,
    step: float = 1e-6,
) -> float:
    """Max relative error between `analytic_grad` and central differences of `f` at `x`."""
    if not step > 0:
        raise InvalidInputError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientCheckError(f"non-finite objective at coordinate {j}")
        numeric = (fp - fm) / (2.0 * step)
        gj = grad.reshape(-1)[j]
        worst = max(worst, abs(numeric - gj) / (abs(gj) + 1e-8))
    return worst
