from peft_fusion.fusion.block import FusionBlock, FusionOutput, fusion_forward
from peft_fusion.fusion.capture import AttentionCapture, SampleAttention, capture_attention
from peft_fusion.fusion.stack import FusionStack

__all__ = [
    "AttentionCapture",
    "FusionBlock",
    "FusionOutput",
    "FusionStack",
    "SampleAttention",
    "capture_attention",
    "fusion_forward",
]
