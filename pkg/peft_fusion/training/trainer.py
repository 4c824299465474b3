from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from peft_fusion.backbone import Backbone
from peft_fusion.corpus import IGNORE_INDEX, EncodedSample, Sample, Vocabulary, by_language, clm_labels, encode
from peft_fusion.exceptions import (
    DataError,
    NumericalError,
    TrainingError,
    UsageError,
    create_error_context,
)
from peft_fusion.fusion import FusionStack
from peft_fusion.numcore import Tensor, backward, derive_rng, ops
from peft_fusion.peft import AdapterSet
from peft_fusion.training.bundle import ModelBundle
from peft_fusion.training.events import EventLog
from peft_fusion.training.optim import Adam
from peft_fusion.training.plan import TrainingPlan
from peft_fusion.typed import Phase, TrainingEvent, TrainingMode
from peft_fusion.utils import Prefetcher, batch_items, round_robin

logger = logging.getLogger(__name__)

Batch = tuple[str | None, tuple[EncodedSample, ...]]


@dataclass(slots=True)
class StepInfo:
    step: int
    epoch: int
    phase: Phase
    language: str | None
    masked: frozenset[str]
    loss: float | None = None
    trainable: list[Tensor] = field(default_factory=list)


@dataclass
class TrainingHooks:
    """Optional callbacks; ``before_step`` sees the mask the step will use."""

    before_step: Callable[[StepInfo], None] | None = None
    after_step: Callable[[StepInfo], None] | None = None
    on_phase_end: Callable[[Phase, ModelBundle], None] | None = None


@dataclass
class TrainingResult:
    bundle: ModelBundle
    step_losses: list[float]
    epoch_losses: list[float]
    lineage: dict[str, Any]
    frozen_hashes: dict[str, str] = field(default_factory=dict)


def batch_loss(bundle: ModelBundle, batch: Sequence[EncodedSample], full_sequence: bool = False) -> Tensor:
    """Mean of per-sample CLM losses; target-segment positions only unless ``full_sequence``."""
    plugins = bundle.plugins()
    total: Tensor | None = None
    for encoded in batch:
        labels = clm_labels(encoded.ids, None if full_sequence else encoded.loss_mask)
        logits = bundle.backbone.forward(encoded.ids, plugins).logits
        loss = ops.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX)
        total = loss if total is None else ops.add(total, loss)
    if total is None:
        raise DataError("empty batch", error_code="BATCH_EMPTY")
    return ops.scale(total, 1.0 / len(batch))


class _Loop:
    """Shared optimization loop over epochs and phases of one run."""

    def __init__(
        self,
        bundle: ModelBundle,
        plan: TrainingPlan,
        trainable: Sequence[Tensor],
        frozen: Sequence[Tensor],
        events: EventLog | None,
        hooks: TrainingHooks | None,
        vocab: Vocabulary,
        full_sequence: bool = False,
    ):
        self.bundle = bundle
        self.plan = plan
        self.trainable = list(trainable)
        self.frozen = list(frozen)
        self.events = events if events is not None else EventLog()
        self.hooks = hooks or TrainingHooks()
        self.vocab = vocab
        self.full_sequence = full_sequence
        self.optimizer = Adam(self.trainable, lr=plan.lr, beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps)
        self.step = 0
        self.epoch = 0
        self.step_losses: list[float] = []
        self.epoch_losses: list[float] = []

    def _encode_batches(self, batches: Sequence[tuple[str | None, tuple[Sample, ...]]]) -> Iterator[Batch]:
        for language, samples in batches:
            yield language, tuple(encode(sample, self.vocab, self.plan.max_seq_len) for sample in samples)

    def _epoch_plan(self, samples: Sequence[Sample], interleave: bool) -> list[tuple[str | None, tuple[Sample, ...]]]:
        """Seeded batch order for the current epoch (shuffle keyed by run seed and epoch number)."""
        size = self.plan.batch_size
        if not interleave:
            order = derive_rng(self.plan.seed, "shuffle", self.epoch).permutation(len(samples))
            shuffled = [samples[int(i)] for i in order]
            planned = []
            for batch in batch_items(shuffled, size):
                languages = {sample.language for sample in batch}
                planned.append((next(iter(languages)) if len(languages) == 1 else None, batch))
            return planned
        groups = []
        for language, part in by_language(samples).items():
            order = derive_rng(self.plan.seed, "shuffle", self.epoch, language).permutation(len(part))
            shuffled = [part[int(i)] for i in order]
            groups.append((language, list(batch_items(shuffled, size))))
        return list(round_robin(groups))

    def _frozen_grad_max(self) -> float:
        worst = 0.0
        for tensor in self.frozen:
            if tensor.grad is not None:
                worst = max(worst, float(np.max(np.abs(tensor.grad))))
        return worst

    def log(self, event: str, phase: Phase, loss: float | None = None, **extra: Any) -> None:
        self.events.append(
            TrainingEvent(
                event=event, step=self.step, epoch=self.epoch, phase=phase, loss=loss, lr=self.plan.lr, **extra
            )
        )

    def run_step(
        self, phase: Phase, language: str | None, batch: Sequence[EncodedSample], mask: frozenset[str]
    ) -> float:
        fusion = self.bundle.fusion
        if fusion is not None and fusion.mask != mask:
            fusion.set_mask(mask)
        info = StepInfo(self.step + 1, self.epoch, phase, language, mask, trainable=self.trainable)
        if self.hooks.before_step is not None:
            self.hooks.before_step(info)
        self.optimizer.zero_grad()
        for tensor in self.frozen:
            tensor.grad = None
        context = create_error_context(
            component="training", step=self.step + 1, language=language, phase=phase.value, epoch=self.epoch
        )
        try:
            loss = batch_loss(self.bundle, batch, self.full_sequence)
        except NumericalError as exc:
            raise TrainingError(
                f"non-finite value in the forward pass at step {self.step + 1} ({phase.value}, "
                f"language={language}); aborting",
                error_code="LOSS_NAN",
                context=context,
                cause=exc,
            ) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"loss is {value} at step {self.step + 1}; aborting", error_code="LOSS_NAN", context=context
            )
        backward(loss)
        frozen_max = self._frozen_grad_max()
        if frozen_max != 0.0:
            raise TrainingError(
                f"frozen tensors received gradient (max |g| = {frozen_max})",
                error_code="FROZEN_GRADIENT",
                context=context,
            )
        self.optimizer.step()
        self.step += 1
        self.step_losses.append(value)
        self.log(
            "step", phase, value, language=language, masked=tuple(sorted(mask)), frozen_grad_max=frozen_max
        )
        if self.hooks.after_step is not None:
            info.loss = value
            self.hooks.after_step(info)
        return value

    def run_epochs(
        self,
        phase: Phase,
        epochs: int,
        samples: Sequence[Sample],
        interleave: bool,
        mask_for: Callable[[str | None], frozenset[str]] = lambda _: frozenset(),
    ) -> None:
        self.log("phase_start", phase, masked=tuple(sorted(mask_for(None))))
        for _ in range(epochs):
            self.epoch += 1
            planned = self._epoch_plan(samples, interleave)
            losses = []
            with Prefetcher(self._encode_batches(planned), depth=self.plan.prefetch_depth) as batches:
                for language, batch in batches:
                    losses.append(self.run_step(phase, language, batch, mask_for(language)))
            mean = float(np.mean(losses)) if losses else 0.0
            self.epoch_losses.append(mean)
            self.log("epoch_end", phase, mean)


def _require_samples(samples: Sequence[Sample], what: str) -> None:
    if not samples:
        raise DataError(f"cannot train {what} on an empty corpus", error_code="CORPUS_EMPTY")


def _tensors(*modules: Any) -> list[Tensor]:
    tensors: list[Tensor] = []
    seen: set[int] = set()
    for module in modules:
        for tensor in module.parameters():
            if id(tensor) not in seen:
                seen.add(id(tensor))
                tensors.append(tensor)
    return tensors


def _check_frozen(before: Mapping[str, str], bundle: ModelBundle, names: Sequence[str]) -> dict[str, str]:
    after = bundle.group_hashes()
    changed = [name for name in names if before[name] != after[name]]
    if changed:
        raise TrainingError(
            f"frozen group(s) changed during training: {changed}",
            error_code="FROZEN_MUTATED",
            context=create_error_context(component="training", groups=changed),
        )
    return {name: after[name] for name in names}


def pretrain_backbone(
    backbone: Backbone,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    plan: TrainingPlan,
    events: EventLog | None = None,
    hooks: TrainingHooks | None = None,
) -> TrainingResult:
    """Full-sequence CLM over the combined corpus; the backbone is frozen afterwards."""
    _require_samples(samples, "the backbone")
    bundle = ModelBundle(backbone=backbone)
    backbone.unfreeze()
    loop = _Loop(bundle, plan, _tensors(backbone), [], events, hooks, vocab, full_sequence=True)
    try:
        loop.run_epochs(Phase.PRETRAIN, plan.epochs, samples, interleave=False)
    finally:
        backbone.freeze()
    lineage = {"mode": TrainingMode.PRETRAIN.value, "epochs": plan.epochs, "steps": loop.step}
    return TrainingResult(bundle, loop.step_losses, loop.epoch_losses, lineage)


def train_language_adapter(
    backbone: Backbone,
    adapter_set: AdapterSet,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    plan: TrainingPlan,
    events: EventLog | None = None,
    hooks: TrainingHooks | None = None,
) -> TrainingResult:
    """Train one language's modules on that language's data; only their parameters move."""
    own = [sample for sample in samples if sample.language == adapter_set.language_tag]
    _require_samples(own, f"the '{adapter_set.language_tag}' adapter")
    if len(own) != len(samples):
        logger.warning(
            "ignoring %d sample(s) not in language '%s'", len(samples) - len(own), adapter_set.language_tag
        )
    bundle = ModelBundle(backbone=backbone, adapter_sets={adapter_set.language_tag: adapter_set})
    backbone.freeze()
    adapter_set.unfreeze()
    before = bundle.group_hashes()
    loop = _Loop(bundle, plan, _tensors(adapter_set), _tensors(backbone), events, hooks, vocab)
    loop.run_epochs(Phase.ADAPTER, plan.epochs, own, interleave=False)
    frozen = _check_frozen(before, bundle, ["backbone"])
    lineage = {
        "mode": TrainingMode.ADAPTER.value,
        "kind": adapter_set.kind.value,
        "language": adapter_set.language_tag,
        "backbone": frozen["backbone"],
        "epochs": plan.epochs,
        "steps": loop.step,
    }
    return TrainingResult(bundle, loop.step_losses, loop.epoch_losses, lineage, frozen)


def _fusion_setup(
    backbone: Backbone,
    adapter_sets: Mapping[str, AdapterSet],
    fusion: FusionStack,
    plan: TrainingPlan,
) -> ModelBundle:
    tags = tuple(plan.adapter_tags)
    if set(tags) != set(adapter_sets) or tuple(fusion.adapter_order) != tags:
        raise UsageError(
            f"fusion order {list(fusion.adapter_order)} and adapters {sorted(adapter_sets)} "
            f"do not match the plan {list(tags)}",
            error_code="FUSION_SETUP_MISMATCH",
        )
    kinds = {adapter_set.kind for adapter_set in adapter_sets.values()}
    if len(kinds) != 1:
        raise UsageError(
            f"fusion composes one adapter kind, got {sorted(kind.value for kind in kinds)}",
            error_code="FUSION_KIND_MISMATCH",
        )
    kind = next(iter(kinds))
    if not kind.has_slot_output:
        raise UsageError(f"{kind.value} modules cannot be fused", error_code="FUSION_KIND_UNSUPPORTED")
    bundle = ModelBundle(backbone=backbone, adapter_sets=dict(adapter_sets), fusion=fusion)
    backbone.freeze()
    for adapter_set in adapter_sets.values():
        adapter_set.freeze()
    fusion.unfreeze()
    return bundle


def _fusion_lineage(bundle: ModelBundle, plan: TrainingPlan, frozen: Mapping[str, str], phases: list[dict]) -> dict:
    kind = next(iter(bundle.adapter_sets.values())).kind.value
    return {
        "mode": plan.mode.value,
        "kind": kind,
        "adapters": list(plan.adapter_tags),
        "target": plan.target_language,
        "backbone": frozen["backbone"],
        "adapter_hashes": {name: digest for name, digest in frozen.items() if name != "backbone"},
        "phases": phases,
        "mask_mode": plan.mask_mode.value,
        "mask_policy": plan.mask_policy,
    }


def train_adapterfusion(
    backbone: Backbone,
    adapter_sets: Mapping[str, AdapterSet],
    fusion: FusionStack,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    plan: TrainingPlan,
    events: EventLog | None = None,
    hooks: TrainingHooks | None = None,
) -> TrainingResult:
    """Train only the fusion Q/K/V over frozen adapters on the mixed corpus."""
    _require_samples(samples, "the fusion")
    bundle = _fusion_setup(backbone, adapter_sets, fusion, plan)
    fusion.set_mask(())
    frozen_names = [name for name in bundle.groups() if name != "fusion"]
    before = bundle.group_hashes()
    frozen_modules = [bundle.groups()[name] for name in frozen_names]
    loop = _Loop(bundle, plan, _tensors(fusion), _tensors(*frozen_modules), events, hooks, vocab)
    loop.run_epochs(Phase.FUSION, plan.total_epochs, samples, interleave=True)
    frozen = _check_frozen(before, bundle, frozen_names)
    phases = [{"phase": Phase.FUSION.value, "epochs": plan.total_epochs, "mask": []}]
    lineage = _fusion_lineage(bundle, plan, frozen, phases)
    lineage["steps"] = loop.step
    return TrainingResult(bundle, loop.step_losses, loop.epoch_losses, lineage, frozen)


def train_advfusion(
    backbone: Backbone,
    adapter_sets: Mapping[str, AdapterSet],
    fusion: FusionStack,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    plan: TrainingPlan,
    events: EventLog | None = None,
    hooks: TrainingHooks | None = None,
) -> TrainingResult:
    """Two equal phases: the target adapter masked, then every adapter attending.

    Phase 2 continues from the phase-1 fusion weights; optimizer moments
    carry over unless ``plan.reset_moments_phase2``.
    """
    _require_samples(samples, "the fusion")
    target = plan.target_language
    if target is None or target not in adapter_sets:
        raise UsageError(
            f"target '{target}' has no adapter among {sorted(adapter_sets)}", error_code="TARGET_NOT_FUSED"
        )
    if len(adapter_sets) < 2:
        raise UsageError("advfusion needs at least two adapters", error_code="TOO_FEW_ADAPTERS")
    bundle = _fusion_setup(backbone, adapter_sets, fusion, plan)
    hooks = hooks or TrainingHooks()
    frozen_names = [name for name in bundle.groups() if name != "fusion"]
    before = bundle.group_hashes()
    frozen_modules = [bundle.groups()[name] for name in frozen_names]
    loop = _Loop(bundle, plan, _tensors(fusion), _tensors(*frozen_modules), events, hooks, vocab)

    target_mask = frozenset({target})
    if plan.mask_policy == "batch_language":

        def phase1_mask(language: str | None) -> frozenset[str]:
            if language is None:
                return target_mask
            return frozenset({language}) if language in adapter_sets else frozenset()

    else:

        def phase1_mask(language: str | None) -> frozenset[str]:  # noqa: ARG001
            return target_mask

    fusion.set_mask(target_mask)
    loop.run_epochs(Phase.ADVERSARIAL, plan.epochs_per_phase, samples, interleave=True, mask_for=phase1_mask)
    fusion.set_mask(target_mask)
    if hooks.on_phase_end is not None:
        hooks.on_phase_end(Phase.ADVERSARIAL, bundle)

    fusion.set_mask(())
    loop.log("mask_flip", Phase.FINETUNE, masked=())
    if plan.reset_moments_phase2:
        loop.optimizer.reset_moments()
    loop.run_epochs(Phase.FINETUNE, plan.epochs_per_phase, samples, interleave=True)
    if hooks.on_phase_end is not None:
        hooks.on_phase_end(Phase.FINETUNE, bundle)

    frozen = _check_frozen(before, bundle, frozen_names)
    phases = [
        {"phase": Phase.ADVERSARIAL.value, "epochs": plan.epochs_per_phase, "mask": sorted(target_mask)},
        {"phase": Phase.FINETUNE.value, "epochs": plan.epochs_per_phase, "mask": []},
    ]
    lineage = _fusion_lineage(bundle, plan, frozen, phases)
    lineage["steps"] = loop.step
    return TrainingResult(bundle, loop.step_losses, loop.epoch_losses, lineage, frozen)
