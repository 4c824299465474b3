from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

from peft_fusion.backbone import Backbone, LayerPlugins, empty_plugins
from peft_fusion.exceptions import UsageError
from peft_fusion.fusion import FusionStack
from peft_fusion.numcore import Module
from peft_fusion.peft import AdapterSet


def adapter_group(adapter_set: AdapterSet) -> str:
    return f"adapter.{adapter_set.kind.value}.{adapter_set.language_tag}"


@dataclass
class ModelBundle:
    """A backbone with the adapter sets and the fusion stack attached to it.

    ``plugins()`` decides how they are wired: with a fusion stack every
    adapter set is fused; without one at most one set may be attached.
    """

    backbone: Backbone
    adapter_sets: dict[str, AdapterSet] = field(default_factory=dict)
    fusion: FusionStack | None = None

    def plugins(self) -> list[LayerPlugins]:
        if self.fusion is not None:
            return self.fusion.plugins(self.adapter_sets)
        if not self.adapter_sets:
            return empty_plugins(self.backbone.config.num_layers)
        if len(self.adapter_sets) > 1:
            raise UsageError(
                f"{len(self.adapter_sets)} adapter sets attached without a fusion stack",
                error_code="ADAPTERS_WITHOUT_FUSION",
            )
        return next(iter(self.adapter_sets.values())).plugins()

    def groups(self) -> dict[str, Module]:
        """Checkpoint groups in a fixed order: backbone, adapters by tag, fusion."""
        groups: dict[str, Module] = {"backbone": self.backbone}
        for tag in sorted(self.adapter_sets):
            adapter_set = self.adapter_sets[tag]
            groups[adapter_group(adapter_set)] = adapter_set
        if self.fusion is not None:
            groups["fusion"] = self.fusion
        return groups

    def group_hashes(self) -> dict[str, str]:
        return {name: module.content_hash() for name, module in self.groups().items()}

    def freeze_all(self) -> None:
        for module in self.groups().values():
            module.freeze()

    def view(self) -> Mapping[str, Module]:
        """Named view for parameter counting."""
        return self.groups()
