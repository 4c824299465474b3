from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from typing import TYPE_CHECKING

from peft_fusion.backbone.plugins import LayerPlugins
from peft_fusion.exceptions import UsageError, create_error_context
from peft_fusion.fusion.block import FusionBlock
from peft_fusion.numcore import Module
from peft_fusion.typed import MaskMode

if TYPE_CHECKING:
    from peft_fusion.peft.adapter_set import AdapterSet


class FusionStack(Module):
    """One :class:`FusionBlock` per decoder layer, sharing adapter order and mask."""

    def __init__(
        self,
        num_layers: int,
        hidden_size: int,
        adapter_order: Sequence[str],
        seed: int = 0,
        init_std: float = 0.02,
        mask_mode: MaskMode | str = MaskMode.EXCLUDE,
    ):
        super().__init__()
        self.adapter_order = tuple(adapter_order)
        self.blocks: list[FusionBlock] = []
        for index in range(num_layers):
            block = FusionBlock(
                index, hidden_size, self.adapter_order, seed=seed, init_std=init_std, mask_mode=MaskMode(mask_mode)
            )
            self.blocks.append(block)
            self.add_module(f"layers.{index}", block)

    @property
    def mask(self) -> frozenset[str]:
        return self.blocks[0].mask

    def set_mask(self, tags: Iterable[str]) -> FusionStack:
        tags = frozenset(tags)
        for block in self.blocks:
            block.set_mask(tags)
        return self

    def plugins(self, adapter_sets: Mapping[str, AdapterSet]) -> list[LayerPlugins]:
        """Fuse the slot adapters of ``adapter_sets`` at every layer."""
        missing = [tag for tag in self.adapter_order if tag not in adapter_sets]
        if missing:
            raise UsageError(
                f"fusion expects adapters for {missing}, none supplied",
                error_code="FUSION_ADAPTER_MISSING",
                context=create_error_context(component="fusion"),
            )
        kinds = {adapter_sets[tag].kind for tag in self.adapter_order}
        if len(kinds) != 1 or not next(iter(kinds)).has_slot_output:
            raise UsageError(
                f"fusion composes one slot-adapter kind, got {sorted(k.value for k in kinds)}",
                error_code="FUSION_KIND_MISMATCH",
                context=create_error_context(component="fusion"),
            )
        return [
            LayerPlugins(
                adapters={tag: adapter_sets[tag].slot_adapter(index) for tag in self.adapter_order},
                mixer=block,
            )
            for index, block in enumerate(self.blocks)
        ]
