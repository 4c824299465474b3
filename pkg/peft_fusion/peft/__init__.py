from peft_fusion.peft.adapter_set import AdapterSet, build_adapter_set, parse_adapter_kind
from peft_fusion.peft.base import AdapterModule, SlotAdapterModule
from peft_fusion.peft.bottleneck import BottleneckAdapter, bottleneck_forward
from peft_fusion.peft.compacter import (
    CompacterAdapter,
    PHMProjection,
    PHMRule,
    check_phm_divisibility,
    phm_compose,
)
from peft_fusion.peft.counting import ParamCount, param_count
from peft_fusion.peft.lora import LORA_TARGETS, LoRAAdapter, lora_forward

__all__ = [
    "LORA_TARGETS",
    "AdapterModule",
    "AdapterSet",
    "BottleneckAdapter",
    "CompacterAdapter",
    "LoRAAdapter",
    "PHMProjection",
    "PHMRule",
    "ParamCount",
    "SlotAdapterModule",
    "bottleneck_forward",
    "build_adapter_set",
    "check_phm_divisibility",
    "lora_forward",
    "param_count",
    "parse_adapter_kind",
    "phm_compose",
]
