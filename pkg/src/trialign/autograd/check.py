from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tape, Tensor


def numeric_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, evaluated off-tape."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(x.copy())).data)
        flat[i] = orig - step
        fm = float(fn(Tensor(x.copy())).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def analytic_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> tuple[np.ndarray, Tape]:
    with Tape() as tape:
        x = tape.variable(point)
        y = fn(x)
    return tape.gradient(y, [x])[0], tape


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Relative error ``|a - b| / (|a| + |b| + 1e-12)`` between tape and central-difference gradients.

    ``|.|`` is the Euclidean norm over all entries, so coordinates with
    vanishing gradient do not turn round-off into a spurious failure.
    """
    point = np.asarray(point, dtype=np.float64)
    a, _ = analytic_gradient(fn, point)
    b = numeric_gradient(fn, point, step)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + np.linalg.norm(b) + 1e-12))
