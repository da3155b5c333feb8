"""Central finite-difference checks for :mod:`duett.tensor` graphs.

Run under ``precision("float64")``; float32 round-off swamps the
difference quotient long before the truncation error matters.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numeric_grad(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> list[np.ndarray]:
    """d f / d p by central differences, perturbing ``p.data`` in place."""
    out = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().data)
            flat[k] = orig - h
            down = float(f().data)
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_grad(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6, floor_scale: float = 1e-5) -> float:
    """Largest per-parameter relative error between analytic and numeric gradients.

    The denominator is floored at ``floor_scale`` times the norm of the whole
    gradient, so a parameter whose true gradient is exactly zero (attention
    key biases, for one) is judged on absolute difference-quotient noise.
    """
    params = list(params)
    analytic = grad(f(), params)
    numeric = numeric_grad(f, params, h)
    total = np.sqrt(sum(float(np.sum(np.asarray(a, dtype=np.float64) ** 2)) for a in analytic))
    floor = max(floor_scale * total, 1e-12)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))
