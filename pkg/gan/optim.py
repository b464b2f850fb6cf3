from dataclasses import dataclass, field
from typing import List

import numpy as np

from gan.exceptions import DimensionError, TrainingError


@dataclass
class OptimizerState:
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        zeros = [np.zeros_like(p) for p in params]
        return cls(zeros, [z.copy() for z in zeros], 0)


def adam_step(params, grads, state, config, names=None):
    """
    One bias-corrected adaptive-moment update. ``config`` supplies
    ``learning_rate``, ``adam_beta1``, ``adam_beta2`` and ``adam_eps``.
    Returns new parameter arrays and a new state; inputs are left untouched.
    """
    names = names or [f"param{i}" for i in range(len(params))]
    if len(grads) != len(params):
        raise DimensionError(
            f"adam_step: {len(params)} parameters but {len(grads)} gradients"
        )
    if not state.first:
        state = OptimizerState.zeros_like(params)

    step = state.step + 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    # bias corrections applied once per step
    step_size = config.learning_rate / (1.0 - beta1 ** step)
    correction2 = 1.0 - beta2 ** step

    new_params, first, second = [], [], []
    for name, p, g, m, v in zip(names, params, grads, state.first, state.second):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(
                f"adam_step: gradient of {name} has the wrong shape", p.shape, g.shape
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient for parameter {name}", parameter=name
            )
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / correction2) + config.adam_eps
        new_params.append(p - step_size * m / denom)
        first.append(m)
        second.append(v)
    return new_params, OptimizerState(first, second, step)
