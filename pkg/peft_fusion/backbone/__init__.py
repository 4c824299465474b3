from peft_fusion.backbone.model import Backbone, DecoderLayer, ForwardResult, LayerState
from peft_fusion.backbone.plugins import (
    PROJECTION_TARGETS,
    LayerPlugins,
    ProjectionAdapter,
    SlotAdapter,
    SlotMixer,
    empty_plugins,
)

__all__ = [
    "PROJECTION_TARGETS",
    "Backbone",
    "DecoderLayer",
    "ForwardResult",
    "LayerPlugins",
    "LayerState",
    "ProjectionAdapter",
    "SlotAdapter",
    "SlotMixer",
    "empty_plugins",
]
