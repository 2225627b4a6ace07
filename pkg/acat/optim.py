"""
First-order optimizers operating in place on parameter tensors.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Sequence

import numpy as np

from errors import MissingGradientError
from tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Update rule, hyperparameters and per-parameter moment buffers.

    Buffers are keyed by parameter name so a restored state lines up with
    restored weights.
    """
    rule: Literal["sgd", "adam"] = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"Unknown optimizer rule: {self.rule}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def _key(param: Tensor, position: int) -> str:
    return param.name or f"param_{position}"


def optimizer_step(state: OptimizerState, params: Sequence[Tensor]) -> None:
    """
    Apply one update to every parameter and clear its gradient.

    Raises:
        MissingGradientError: if any parameter has no gradient; no parameter is
            modified in that case.
    """
    for position, param in enumerate(params):
        if param.grad is None:
            raise MissingGradientError(f"parameter '{_key(param, position)}' has no gradient")

    state.step_count += 1
    for position, param in enumerate(params):
        grad = param.grad.astype(np.float64)
        slots = state.buffers.setdefault(_key(param, position), {})
        if state.rule == "sgd":
            if state.momentum:
                velocity = slots.get("velocity", np.zeros_like(grad))
                velocity = state.momentum * velocity + grad
                slots["velocity"] = velocity
                update = state.learning_rate * velocity
            else:
                update = state.learning_rate * grad
        else:
            m = state.beta1 * slots.get("m", np.zeros_like(grad)) + (1 - state.beta1) * grad
            v = state.beta2 * slots.get("v", np.zeros_like(grad)) + (1 - state.beta2) * grad * grad
            slots["m"], slots["v"] = m, v
            m_hat = m / (1 - state.beta1 ** state.step_count)
            v_hat = v / (1 - state.beta2 ** state.step_count)
            update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        param.data = (param.data - update).astype(param.dtype)
        param.grad = None
