"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DimensionError
from .operators import ForwardOperator, KSpaceData


def check_image(x, name: str = "image") -> np.ndarray:
    """2-D finite complex image."""
    a = np.asarray(x)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (H, W), got shape {a.shape}")
    a = a.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} contains non-finite values")
    return a


def check_image_stack(X, name: str = "X") -> list[np.ndarray]:
    """Non-empty (N, H, W) stack or sequence of same-sized images."""
    images = [check_image(x, f"{name}[{i}]") for i, x in enumerate(X)]
    if not images:
        raise ContractError(f"{name} is empty")
    if len({x.shape for x in images}) != 1:
        raise DimensionError(f"{name}: images differ in size")
    return images


def check_operator(A) -> ForwardOperator:
    if not isinstance(A, ForwardOperator):
        raise ContractError(f"expected a ForwardOperator, got {type(A).__name__}")
    return A


def check_kspace(y, A: ForwardOperator) -> np.ndarray:
    """Measurement array matching ``A``'s (C, H, W) extent."""
    values = y.values if isinstance(y, KSpaceData) else np.asarray(y)
    if values.shape != A.coils.shape:
        raise DimensionError(f"k-space shape {values.shape} does not match operator {A.coils.shape}")
    values = values.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(values)):
        raise ContractError("k-space contains non-finite values")
    return values


def check_positive(value, name: str) -> float:
    v = float(value)
    if not v > 0:
        raise ContractError(f"{name} must be > 0, got {value!r}")
    return v


def check_is_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise ContractError(f"{type(est).__name__} is not fitted; call fit first")
