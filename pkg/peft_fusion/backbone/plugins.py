from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol, runtime_checkable

if TYPE_CHECKING:
    from peft_fusion.fusion.block import FusionOutput
    from peft_fusion.numcore import Tensor

PROJECTION_TARGETS = ("query", "key", "value", "out")


@runtime_checkable
class SlotAdapter(Protocol):
    """A module that sits in a layer's adapter slot: ``z = f(h_l, r_l)``."""

    language_tag: str

    def __call__(self, h: Tensor, r: Tensor) -> Tensor: ...


@runtime_checkable
class ProjectionAdapter(Protocol):
    """A module that rewrites one frozen attention projection (LoRA)."""

    def __call__(self, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor: ...


@runtime_checkable
class SlotMixer(Protocol):
    """Combines the outputs of several slot adapters (AdapterFusion)."""

    def mix(
        self,
        h: Tensor,
        r: Tensor,
        adapters: dict[str, SlotAdapter],
    ) -> tuple[Tensor, FusionOutput, dict[str, Tensor]]: ...


@dataclass(slots=True)
class LayerPlugins:
    """Everything attached to one decoder layer.

    Parameters
    ----------
    adapters : dict[str, SlotAdapter]
        Slot adapters keyed by language tag. Without a mixer at most one is allowed.
    mixer : SlotMixer | None
        Fusion block composing ``adapters``; its output replaces the slot output.
    projections : dict[str, ProjectionAdapter]
        Projection rewrites keyed by target name (``query``, ``value``, ...).

    """

    adapters: dict[str, SlotAdapter] = field(default_factory=dict)
    mixer: SlotMixer | None = None
    projections: dict[str, ProjectionAdapter] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.adapters and self.mixer is None and not self.projections


def empty_plugins(num_layers: int) -> list[LayerPlugins]:
    return [LayerPlugins() for _ in range(num_layers)]
