from __future__ import annotations

import numpy as np

from peft_fusion.numcore import Tensor, derive_rng, gaussian, ops
from peft_fusion.peft.base import SlotAdapterModule
from peft_fusion.typed import AdapterKind


class BottleneckAdapter(SlotAdapterModule):
    """Sequential bottleneck adapter ``z = U(ReLU(D h + b_D)) + b_U + r``.

    ``D`` is ``[h x d]`` and gaussian-initialized; ``U`` is ``[d x h]`` and
    zero-initialized so a fresh adapter passes the residual through unchanged.
    """

    kind = AdapterKind.BOTTLENECK

    def __init__(
        self,
        language_tag: str,
        layer_index: int,
        hidden_size: int,
        bottleneck_dim: int,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        super().__init__(language_tag, layer_index, hidden_size)
        self.bottleneck_dim = bottleneck_dim
        rng = derive_rng(seed, "bottleneck", language_tag, layer_index)
        self.register_parameter("down.weight", gaussian(rng, (hidden_size, bottleneck_dim), init_std))
        self.register_parameter("down.bias", np.zeros(bottleneck_dim))
        self.register_parameter("up.weight", np.zeros((bottleneck_dim, hidden_size)))
        self.register_parameter("up.bias", np.zeros(hidden_size))

    def __call__(self, h: Tensor, r: Tensor) -> Tensor:
        return bottleneck_forward(h, r, self)


def bottleneck_forward(h_l: Tensor, r_l: Tensor, module: BottleneckAdapter) -> Tensor:
    """Down-project, ReLU, up-project, then add the residual ``r_l``."""
    module._expect_kind(AdapterKind.BOTTLENECK, "bottleneck_forward")  # noqa: SLF001
    module._expect_width("bottleneck_forward", h_l, r_l)  # noqa: SLF001
    p = module._parameters  # noqa: SLF001
    down = ops.relu(ops.linear(h_l, p["down.weight"], p["down.bias"]))
    return ops.add(ops.linear(down, p["up.weight"], p["up.bias"]), r_l)
