"""
Central-difference verification of reverse-mode gradients.
"""

import logging
from typing import Callable

import numpy as np

from config import GRADCHECK_STEP
from errors import GradientCheckError
from tensor_core import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def _evaluate(fn: Callable[[Tensor], Tensor], values: np.ndarray) -> float:
    with no_grad():
        out = fn(Tensor(values))
    if out.size != 1:
        raise GradientCheckError(f"function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            step: float = GRADCHECK_STEP) -> float:
    """
    Compare the taped gradient of ``fn`` at ``point`` with central differences.

    The point is upcast to float64 first. Parameters the function closes over
    keep their own dtype; numpy promotion carries the computation to float64.

    Args:
        fn: Scalar-valued function of a single tensor; must be deterministic
            (models should be in eval mode).
        point: Where to evaluate the gradient.
        step: Finite-difference step ``h``.

    Returns:
        Maximum over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise GradientCheckError(f"step must be positive, got {step}")
    base = np.array(point.data, dtype=np.float64)

    first = _evaluate(fn, base)
    second = _evaluate(fn, base)
    if first != second:
        raise GradientCheckError(
            "function is not deterministic between evaluations; "
            "switch models to eval mode before checking gradients")

    variable = Tensor(base.copy(), requires_grad=True)
    out = fn(variable)
    if out.size != 1:
        raise GradientCheckError(f"function must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = variable.grad if variable.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += step
        upper = _evaluate(fn, shifted.reshape(base.shape))
        shifted[i] -= 2 * step
        lower = _evaluate(fn, shifted.reshape(base.shape))
        flat[i] = (upper - lower) / (2 * step)

    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / denominator)) if base.size else 0.0
    logger.debug(f"Gradient check over {base.size} coordinates: max relative error {error:.3e}")
    return error
