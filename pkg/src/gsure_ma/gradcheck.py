"""Central finite-difference oracle for gradient checks."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                 index=None) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place.

    ``fn`` must re-evaluate from scratch and read ``array`` each call.  With
    ``index`` only those flat positions are differentiated (others left 0).
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if index is None else np.atleast_1d(index)
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
