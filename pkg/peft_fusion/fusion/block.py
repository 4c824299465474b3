from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from peft_fusion.exceptions import MaskError, ShapeError, UsageError, create_error_context
from peft_fusion.numcore import Module, Tensor, derive_rng, gaussian, ops
from peft_fusion.typed import MaskMode

if TYPE_CHECKING:
    from peft_fusion.backbone.plugins import SlotAdapter
    from peft_fusion.fusion.capture import AttentionCapture

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class FusionOutput:
    """Result of one fusion pass.

    ``weights`` is ``[T x N_active]`` with columns in ``tags`` order; masked
    adapters are absent from it (exclusion) unless the block emulates masking
    by zeroing, in which case every adapter keeps a column.
    """

    output: Tensor
    weights: Tensor
    tags: tuple[str, ...]

    def full_weights(self, adapter_order: Sequence[str]) -> np.ndarray:
        """``[T x N]`` weights over the whole adapter order, zeros for absent adapters."""
        values = self.weights.data
        full = np.zeros((values.shape[0], len(adapter_order)))
        for column, tag in enumerate(self.tags):
            full[:, adapter_order.index(tag)] = values[:, column]
        return full


class FusionBlock(Module):
    """AdapterFusion attention for one decoder layer.

    The layer's feed-forward output is the query; each adapter output
    ``z_n`` supplies a key and a value. Scores are unscaled dot products.

    Parameters
    ----------
    layer_index : int
        Decoder layer the block belongs to.
    hidden_size : int
        Backbone width ``h``; Q, K and V are ``[h x h]`` without bias.
    adapter_order : Sequence[str]
        Fixed ordering of the fused language tags.
    seed : int, optional
        Run seed. Default: 0
    init_std : float, optional
        Std of the Q and K initializer. Default: 0.02
    mask_mode : MaskMode, optional
        ``EXCLUDE`` removes masked adapters from the softmax; ``ZERO`` keeps
        them and feeds their zero-weight output instead. Default: EXCLUDE

    """

    def __init__(
        self,
        layer_index: int,
        hidden_size: int,
        adapter_order: Sequence[str],
        seed: int = 0,
        init_std: float = 0.02,
        mask_mode: MaskMode = MaskMode.EXCLUDE,
    ):
        super().__init__()
        order = tuple(adapter_order)
        if not order:
            raise UsageError("fusion needs at least one adapter", error_code="FUSION_EMPTY")
        if len(set(order)) != len(order):
            raise UsageError(
                f"duplicate adapter tags in fusion order: {list(order)}",
                error_code="FUSION_DUPLICATE_TAGS",
                context=create_error_context(component="fusion", layer=layer_index),
            )
        self.layer_index = layer_index
        self.hidden_size = hidden_size
        self.adapter_order = order
        self.mask_mode = MaskMode(mask_mode)
        self.mask: frozenset[str] = frozenset()
        self.capture: AttentionCapture | None = None
        rng = derive_rng(seed, "fusion", layer_index)
        h = hidden_size
        self.register_parameter("query.weight", gaussian(rng, (h, h), init_std))
        self.register_parameter("key.weight", gaussian(rng, (h, h), init_std))
        self.register_parameter("value.weight", np.eye(h) + gaussian(rng, (h, h), 1e-6))

    def set_mask(self, tags: Iterable[str]) -> FusionBlock:
        """Replace the set of excluded adapters; at least one must stay active."""
        mask = frozenset(tags)
        unknown = sorted(mask - set(self.adapter_order))
        if unknown:
            raise MaskError(
                f"cannot mask unknown adapter(s) {unknown}; fused adapters are {list(self.adapter_order)}",
                context=create_error_context(component="fusion", layer=self.layer_index),
            )
        if len(mask) >= len(self.adapter_order):
            raise MaskError(
                "mask would exclude every adapter; at least one must attend",
                error_code="FUSION_ALL_MASKED",
                context=create_error_context(component="fusion", layer=self.layer_index),
            )
        self.mask = mask
        return self

    @property
    def active_tags(self) -> tuple[str, ...]:
        return tuple(tag for tag in self.adapter_order if tag not in self.mask)

    def attending_tags(self) -> tuple[str, ...]:
        if self.mask_mode is MaskMode.ZERO:
            return self.adapter_order
        return self.active_tags

    def mix(
        self,
        h: Tensor,
        r: Tensor,
        adapters: Mapping[str, SlotAdapter],
    ) -> tuple[Tensor, FusionOutput, dict[str, Tensor]]:
        """Run the attending adapters and fuse their outputs into the slot output."""
        outputs: dict[str, Tensor] = {}
        for tag in self.attending_tags():
            if tag in self.mask:
                outputs[tag] = r
                continue
            adapter = adapters.get(tag)
            if adapter is None:
                raise UsageError(
                    f"layer {self.layer_index}: no adapter attached for fused tag '{tag}'",
                    error_code="FUSION_ADAPTER_MISSING",
                    context=create_error_context(component="fusion", language=tag),
                )
            outputs[tag] = adapter(h, r)
        fused = fusion_forward(h, outputs, self)
        return fused.output, fused, outputs


def fusion_forward(h_l: Tensor, z: Mapping[str, Tensor], block: FusionBlock) -> FusionOutput:
    """Attend from ``h_l`` over the adapter outputs ``z`` of the block's attending tags.

    ``score_n[t] = (h_l[t] Q) . (z_n[t] K)``, softmax over the attending
    adapters, ``O[t] = sum_n S[t, n] (z_n[t] V)``.
    """
    tags = block.attending_tags()
    if not tags:
        raise MaskError("every adapter is masked", error_code="FUSION_ALL_MASKED")
    missing = [tag for tag in tags if tag not in z]
    if missing:
        raise UsageError(
            f"layer {block.layer_index}: missing adapter output for unmasked tag(s) {missing}",
            error_code="FUSION_OUTPUT_MISSING",
            context=create_error_context(component="fusion", layer=block.layer_index),
        )
    if h_l.ndim != 2 or h_l.shape[1] != block.hidden_size:
        raise ShapeError(
            f"fusion query must be [T x {block.hidden_size}], got {h_l.shape}",
            context=create_error_context(component="fusion", layer=block.layer_index),
        )
    for tag in tags:
        if z[tag].shape != h_l.shape:
            raise ShapeError(
                f"adapter output '{tag}' has shape {z[tag].shape}, query has {h_l.shape}",
                context=create_error_context(component="fusion", language=tag),
            )
    p = block._parameters  # noqa: SLF001
    query = ops.matmul(h_l, p["query.weight"])
    scores = []
    values = []
    for tag in tags:
        key = ops.matmul(z[tag], p["key.weight"])
        scores.append(ops.sum(ops.multiply(query, key), axis=1, keepdims=True))
        values.append(ops.matmul(z[tag], p["value.weight"]))
    stacked = scores[0] if len(scores) == 1 else ops.concat(scores, axis=1)
    weights = ops.softmax(stacked, axis=1)
    output = ops.scale_rows(values[0], ops.slice_columns(weights, 0, 1))
    for column in range(1, len(tags)):
        output = ops.add(output, ops.scale_rows(values[column], ops.slice_columns(weights, column, column + 1)))
    fused = FusionOutput(output=output, weights=weights, tags=tuple(tags))
    if block.capture is not None:
        block.capture.record(block.layer_index, fused.full_weights(block.adapter_order))
    return fused
