"""Dense float64 tensor arithmetic with reverse-mode differentiation."""

from peft_fusion.numcore import ops
from peft_fusion.numcore.gradcheck import GradCheckResult, gradcheck
from peft_fusion.numcore.module import Module, content_hash
from peft_fusion.numcore.random import derive_rng, gaussian
from peft_fusion.numcore.tensor import (
    DTYPE,
    ComputationTape,
    Node,
    Tensor,
    backward,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "DTYPE",
    "ComputationTape",
    "GradCheckResult",
    "Module",
    "Node",
    "Tensor",
    "backward",
    "content_hash",
    "derive_rng",
    "gaussian",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "ops",
]
