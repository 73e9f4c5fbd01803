"""Dense numeric kernels shared by the model, clients, and server.

All math is float64. Every log/division denominator in the codebase is
floored at EPS; vectors with norm below NORM_FLOOR are treated as zero
(no consensus) rather than normalized.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Single floor for logs and division denominators, used everywhere.
EPS = 1e-8

# Below this norm a vector counts as zero for similarity purposes.
NORM_FLOOR = 1e-12


def softmax(scores: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite input to softmax")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_term(p, q):
    """Per-entry KL summand p*log(p/q) with the 0*log(0/q) = 0 convention.

    q is clamped below at EPS before the division. Accepts scalars or
    arrays (elementwise).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("non-finite input to kl_term")
    qc = np.maximum(q, EPS)
    pc = np.maximum(p, EPS)  # only enters through the log; masked where p == 0
    out = np.where(p > 0.0, p * np.log(pc / qc), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 if either vector has norm below NORM_FLOOR."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sigmoid(x):
    """Numerically stable logistic function, scalar or elementwise."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if np.ndim(x) == 0:
        return float(out[0])
    return out


def grad_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    grad: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max abs discrepancy between `grad` and central finite differences of f.

    Perturbs every entry of `params` by +/- eps. `f` must treat its argument
    as read-only apart from the perturbation done here.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError("params/grad shape mismatch")
    work = params.copy()
    flat = work.ravel()
    gflat = grad.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(work)
        flat[i] = orig - eps
        fm = f(work)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(gflat[i] - fd))
    return worst
