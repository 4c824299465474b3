from __future__ import annotations

import numpy as np

from peft_fusion.exceptions import ShapeError, create_error_context
from peft_fusion.numcore import Tensor, derive_rng, gaussian, ops
from peft_fusion.peft.base import AdapterModule
from peft_fusion.typed import AdapterKind

LORA_TARGETS = ("query", "value")


class LoRAAdapter(AdapterModule):
    """Low-rank update of one frozen attention projection.

    ``lora_A`` is ``[in x r]`` gaussian-initialized and ``lora_B`` is
    ``[r x out]`` zero-initialized; the update is scaled by ``alpha / r``.
    """

    kind = AdapterKind.LORA

    def __init__(
        self,
        language_tag: str,
        layer_index: int,
        target: str,
        in_features: int,
        out_features: int,
        rank: int = 16,
        alpha: float = 16.0,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        super().__init__(language_tag, layer_index, in_features)
        if rank < 1 or rank > min(in_features, out_features):
            raise ShapeError(
                f"LoRA rank {rank} exceeds the adapted matrix ({in_features} x {out_features})",
                error_code="LORA_RANK_TOO_LARGE",
                context=create_error_context(component="peft.lora", target=target, rank=rank),
            )
        self.target = target
        self.in_features = in_features
        self.out_features = out_features
        self.rank = rank
        self.alpha = alpha
        rng = derive_rng(seed, "lora", language_tag, layer_index, target)
        self.register_parameter("lora_A", gaussian(rng, (in_features, rank), init_std))
        self.register_parameter("lora_B", np.zeros((rank, out_features)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
        return lora_forward(x, weight, self, bias)


def lora_forward(
    x: Tensor,
    base_W: Tensor,
    module: LoRAAdapter,
    bias: Tensor | None = None,
) -> Tensor:
    """``x @ base_W (+ bias) + (alpha / r) * x @ A @ B``; ``base_W`` stays frozen."""
    module._expect_kind(AdapterKind.LORA, "lora_forward")  # noqa: SLF001
    if base_W.shape != (module.in_features, module.out_features):
        raise ShapeError(
            f"lora_forward: module adapts a {module.in_features} x {module.out_features} matrix, "
            f"got {base_W.shape}",
            context=create_error_context(component="peft.lora", target=module.target),
        )
    p = module._parameters  # noqa: SLF001
    update = ops.scale(ops.matmul(ops.matmul(x, p["lora_A"]), p["lora_B"]), module.scaling)
    return ops.add(ops.linear(x, base_W, bias), update)
