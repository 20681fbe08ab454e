"""Central finite differences, used as an independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_difference_grad(fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """``(fn(x + h e_i) - fn(x - h e_i)) / 2h`` for every coordinate of ``point``.

    ``fn`` receives a float64 array of the same shape as ``point`` and must
    return a scalar.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            idx = np.unravel_index(i, x.shape)
            raise FloatingPointError(f"function is not finite near coordinate {idx}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), taken over the whole array."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
