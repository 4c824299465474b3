from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from peft_fusion.numcore import ops
from peft_fusion.numcore.tensor import DTYPE, Tensor, backward


@dataclass(slots=True)
class GradCheckResult:
    max_relative_error: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of ``sum(fn(*inputs))`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is near zero from dominating.
    """
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]

    def scalar(values: list[np.ndarray]) -> float:
        return float(np.sum(fn(*[Tensor(v) for v in values]).data))

    leaves = [Tensor(v, requires_grad=True) for v in arrays]
    out = fn(*leaves)

    backward(ops.sum(out) if out.size != 1 else out)
    analytic = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    numeric = []
    worst = 0.0
    for index, base in enumerate(arrays):
        estimate = np.zeros_like(base)
        for position in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[index][position] += step
            minus[index][position] -= step
            estimate[position] = (scalar(plus) - scalar(minus)) / (2.0 * step)
        numeric.append(estimate)
        denom = np.maximum(np.maximum(np.abs(analytic[index]), np.abs(estimate)), floor)
        if base.size:
            worst = max(worst, float(np.max(np.abs(analytic[index] - estimate) / denom)))
    return GradCheckResult(max_relative_error=worst, analytic=analytic, numeric=numeric)
