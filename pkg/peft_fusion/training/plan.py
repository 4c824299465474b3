from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from peft_fusion.config import LabConfig
from peft_fusion.exceptions import UsageError, create_error_context
from peft_fusion.typed import MaskMode, TrainingMode


@dataclass(frozen=True, slots=True)
class TrainingPlan:
    """Everything one training run needs besides the model and the data.

    ``epochs`` applies to pretraining and adapter runs; fusion runs use
    ``epochs_per_phase`` (AdapterFusion trains ``2 * epochs_per_phase`` epochs
    too, so both fusion variants see the same amount of data).
    """

    mode: TrainingMode
    lr: float
    batch_size: int
    seed: int
    epochs: int = 1
    epochs_per_phase: int = 1
    adapter_tags: tuple[str, ...] = ()
    target_language: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_mode: MaskMode = MaskMode.EXCLUDE
    mask_policy: str = "target"
    reset_moments_phase2: bool = False
    prefetch_depth: int = 4
    max_seq_len: int | None = None

    def __post_init__(self) -> None:
        context = create_error_context(component="training.plan", mode=self.mode.value)
        if len(set(self.adapter_tags)) != len(self.adapter_tags):
            raise UsageError(
                f"duplicate adapter tags {list(self.adapter_tags)}",
                error_code="DUPLICATE_ADAPTER_TAGS",
                context=context,
            )
        if self.mode in (TrainingMode.FUSION, TrainingMode.ADVFUSION) and len(self.adapter_tags) < 2:
            raise UsageError(
                f"{self.mode.value} needs at least two adapters with distinct tags",
                error_code="TOO_FEW_ADAPTERS",
                context=context,
            )
        if self.mode is TrainingMode.ADVFUSION:
            if self.target_language is None:
                raise UsageError("advfusion needs a target language", error_code="TARGET_REQUIRED", context=context)
            if self.target_language not in self.adapter_tags:
                raise UsageError(
                    f"target '{self.target_language}' is not among the adapters {list(self.adapter_tags)}",
                    error_code="TARGET_NOT_FUSED",
                    context=context,
                )
        if self.mask_policy not in ("target", "batch_language"):
            raise UsageError(f"unknown mask policy '{self.mask_policy}'", error_code="MASK_POLICY_UNKNOWN")

    @property
    def total_epochs(self) -> int:
        if self.mode in (TrainingMode.FUSION, TrainingMode.ADVFUSION):
            return 2 * self.epochs_per_phase
        return self.epochs

    @classmethod
    def from_config(
        cls,
        config: LabConfig,
        mode: TrainingMode,
        adapter_tags: Sequence[str] = (),
        target_language: str | None = None,
    ) -> TrainingPlan:
        training = config.training
        lr = {
            TrainingMode.PRETRAIN: training.pretrain_lr,
            TrainingMode.ADAPTER: training.adapter_lr,
        }.get(mode, training.fusion_lr)
        epochs = training.pretrain_epochs if mode is TrainingMode.PRETRAIN else training.adapter_epochs
        return cls(
            mode=mode,
            lr=lr,
            batch_size=training.batch_size,
            seed=config.seed,
            epochs=epochs,
            epochs_per_phase=training.epochs_per_phase,
            adapter_tags=tuple(adapter_tags),
            target_language=target_language,
            beta1=training.beta1,
            beta2=training.beta2,
            eps=training.adam_eps,
            mask_mode=MaskMode(training.mask_mode),
            mask_policy=training.mask_policy,
            reset_moments_phase2=training.reset_moments_phase2,
            prefetch_depth=training.prefetch_depth,
            max_seq_len=config.backbone.max_seq_len,
        )
