from peft_fusion.training.bundle import ModelBundle, adapter_group
from peft_fusion.training.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    load_checkpoint,
    load_group_into,
    restore_adapter_set,
    restore_backbone,
    restore_bundle,
    save_checkpoint,
)
from peft_fusion.training.events import EventLog
from peft_fusion.training.inference import generate_predictions, trace_attention
from peft_fusion.training.optim import Adam
from peft_fusion.training.plan import TrainingPlan
from peft_fusion.training.trainer import (
    StepInfo,
    TrainingHooks,
    TrainingResult,
    batch_loss,
    pretrain_backbone,
    train_adapterfusion,
    train_advfusion,
    train_language_adapter,
)

__all__ = [
    "FORMAT_VERSION",
    "Adam",
    "Checkpoint",
    "EventLog",
    "ModelBundle",
    "StepInfo",
    "TrainingHooks",
    "TrainingPlan",
    "TrainingResult",
    "adapter_group",
    "batch_loss",
    "generate_predictions",
    "load_checkpoint",
    "load_group_into",
    "pretrain_backbone",
    "restore_adapter_set",
    "restore_backbone",
    "restore_bundle",
    "save_checkpoint",
    "trace_attention",
    "train_adapterfusion",
    "train_advfusion",
    "train_language_adapter",
]
