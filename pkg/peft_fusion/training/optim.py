from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from peft_fusion.exceptions import TrainingError, create_error_context
from peft_fusion.numcore import Tensor


@dataclass(slots=True)
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Adam over a fixed list of tensors.

    A tensor whose gradient is missing or exactly zero is skipped: its value
    and its moments stay as they are. Moments are kept per tensor, so the
    optimizer can carry its state across schedule phases.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise TrainingError(f"learning rate must be non-negative, got {lr}", error_code="LR_NEGATIVE")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[int, _Moments] = {}

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def reset_moments(self) -> None:
        self._state.clear()

    def step(self) -> int:
        """Apply one update; returns the number of tensors that changed."""
        updated = 0
        for param in self.params:
            grad = param.grad
            if grad is None or not np.any(grad):
                continue
            if not np.all(np.isfinite(grad)):
                raise TrainingError(
                    f"non-finite gradient on '{param.name}'",
                    error_code="GRADIENT_NON_FINITE",
                    context=create_error_context(component="training.optim", tensor=param.name),
                )
            state = self._state.get(id(param))
            if state is None:
                state = self._state[id(param)] = _Moments(np.zeros(param.shape), np.zeros(param.shape))
            state.t += 1
            state.m = self.beta1 * state.m + (1.0 - self.beta1) * grad
            state.v = self.beta2 * state.v + (1.0 - self.beta2) * grad * grad
            m_hat = state.m / (1.0 - self.beta1**state.t)
            v_hat = state.v / (1.0 - self.beta2**state.t)
            if self.lr:
                param.data = param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                updated += 1
        return updated
