from __future__ import annotations

import logging
from typing import Any

from peft_fusion.backbone.plugins import LayerPlugins
from peft_fusion.config import BackboneConfig, PeftConfig
from peft_fusion.exceptions import UsageError, create_error_context
from peft_fusion.numcore import Module
from peft_fusion.peft.base import SlotAdapterModule
from peft_fusion.peft.bottleneck import BottleneckAdapter
from peft_fusion.peft.compacter import CompacterAdapter, PHMRule
from peft_fusion.peft.lora import LORA_TARGETS, LoRAAdapter
from peft_fusion.typed import AdapterKind

logger = logging.getLogger(__name__)


class AdapterSet(Module):
    """Every PEFT module one language trains, one entry per decoder layer.

    Parameter names are ``layers.{i}.<module params>``; a Compacter set also
    holds the language's shared rule under ``phm_rule.{i}``, and a LoRA set
    holds ``layers.{i}.query`` and ``layers.{i}.value``.

    Parameters
    ----------
    kind : AdapterKind
        Module family.
    language_tag : str
        Owning language.
    backbone : BackboneConfig
        Shape of the backbone the set attaches to.
    peft : PeftConfig
        Family hyperparameters.
    seed : int, optional
        Run seed. Default: 0

    """

    def __init__(
        self,
        kind: AdapterKind,
        language_tag: str,
        backbone: BackboneConfig,
        peft: PeftConfig,
        seed: int = 0,
    ):
        super().__init__()
        self.kind = kind
        self.language_tag = language_tag
        self.num_layers = backbone.num_layers
        self.hidden_size = h = backbone.hidden_size
        self.bottleneck_dim = peft.resolved_bottleneck_dim(h)
        self.peft = peft
        self._slots: list[SlotAdapterModule] = []
        self._projections: list[dict[str, LoRAAdapter]] = []
        rule = None
        if kind is AdapterKind.COMPACTER:
            rule = PHMRule(peft.phm_dim, language_tag, seed=seed)
            self.add_module("phm_rule", rule)
        for index in range(self.num_layers):
            if kind is AdapterKind.BOTTLENECK:
                module = BottleneckAdapter(
                    language_tag, index, h, self.bottleneck_dim, seed=seed, init_std=peft.init_std
                )
                self._slots.append(self.add_module(f"layers.{index}", module))
            elif kind is AdapterKind.COMPACTER:
                module = CompacterAdapter(
                    language_tag, index, h, self.bottleneck_dim, rule, phm_rank=peft.phm_rank, seed=seed
                )
                self._slots.append(self.add_module(f"layers.{index}", module))
            else:
                projections = {}
                for target in LORA_TARGETS:
                    lora = LoRAAdapter(
                        language_tag,
                        index,
                        target,
                        h,
                        h,
                        rank=peft.lora_rank,
                        alpha=peft.lora_alpha,
                        seed=seed,
                        init_std=peft.init_std,
                    )
                    projections[target] = self.add_module(f"layers.{index}.{target}", lora)
                self._projections.append(projections)
        self.unfreeze()
        logger.debug(
            "built %s adapter set for '%s' with %d parameters",
            kind.value,
            language_tag,
            self.num_parameters(),
        )

    @classmethod
    def from_meta(cls, meta: dict[str, Any], backbone: BackboneConfig, seed: int = 0) -> AdapterSet:
        peft = PeftConfig(**meta["peft"])
        return cls(AdapterKind(meta["kind"]), meta["language"], backbone, peft, seed=seed)

    def meta(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "language": self.language_tag,
            "peft": self.peft.model_dump(mode="json"),
        }

    def slot_adapter(self, layer_index: int) -> SlotAdapterModule:
        if not self.kind.has_slot_output:
            raise UsageError(
                f"{self.kind.value} modules have no slot output",
                error_code="NO_SLOT_OUTPUT",
                context=create_error_context(component="peft", language=self.language_tag),
            )
        return self._slots[layer_index]

    def projections(self, layer_index: int) -> dict[str, LoRAAdapter]:
        return dict(self._projections[layer_index]) if self._projections else {}

    def plugins(self) -> list[LayerPlugins]:
        """Attach the set on its own (no fusion) to every layer."""
        attached = []
        for index in range(self.num_layers):
            if self.kind.has_slot_output:
                attached.append(LayerPlugins(adapters={self.language_tag: self._slots[index]}))
            else:
                attached.append(LayerPlugins(projections=self.projections(index)))
        return attached


def parse_adapter_kind(kind: AdapterKind | str) -> AdapterKind:
    try:
        return AdapterKind(kind)
    except ValueError as exc:
        raise UsageError(
            f"unknown adapter method '{kind}' (expected one of "
            f"{', '.join(k.value for k in AdapterKind)})",
            error_code="UNKNOWN_METHOD",
        ) from exc


def build_adapter_set(
    kind: AdapterKind | str,
    language_tag: str,
    backbone: BackboneConfig,
    peft: PeftConfig,
    seed: int = 0,
) -> AdapterSet:
    kind = parse_adapter_kind(kind)
    return AdapterSet(kind, language_tag, backbone, peft.model_copy(update={"kind": kind.value}), seed=seed)
