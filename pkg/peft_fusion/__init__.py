"""PEFT Fusion - language adapters, AdapterFusion and AdvFusion on a miniature decoder."""

from peft_fusion.backbone import Backbone
from peft_fusion.config import LabConfig
from peft_fusion.exceptions import BaseError
from peft_fusion.fusion import FusionStack
from peft_fusion.peft import AdapterSet, build_adapter_set
from peft_fusion.training import ModelBundle, TrainingPlan
from peft_fusion.typed import AdapterKind, Phase, TrainingMode

__all__ = [
    "AdapterKind",
    "AdapterSet",
    "Backbone",
    "BaseError",
    "FusionStack",
    "LabConfig",
    "ModelBundle",
    "Phase",
    "TrainingMode",
    "TrainingPlan",
    "build_adapter_set",
]
