from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from peft_fusion.exceptions import UsageError, create_error_context
from peft_fusion.fusion import SampleAttention

logger = logging.getLogger(__name__)

Order = Literal["aggregate_then_normalize", "normalize_then_aggregate"]


@dataclass(frozen=True)
class ScoreTable:
    """Mean fusion weight per ``(layer, adapter)`` over every token of every sample."""

    tags: tuple[str, ...]
    means: np.ndarray
    sample_count: int
    token_count: int


@dataclass(frozen=True)
class LayerContribution:
    layer: int
    tags: tuple[str, ...]
    raw: tuple[float, ...]
    normalized: tuple[float, ...]
    percent: tuple[float, ...]
    degenerate: bool = False

    def top(self) -> str:
        return self.tags[int(np.argmax(self.percent))]


@dataclass(frozen=True)
class AttentionTrace:
    """Per-layer language contributions of one fused model on one split."""

    layers: tuple[LayerContribution, ...]
    sample_count: int
    token_count: int
    order: Order = "aggregate_then_normalize"

    @property
    def tags(self) -> tuple[str, ...]:
        return self.layers[0].tags if self.layers else ()

    def share(self, layer: int, tag: str) -> float:
        entry = self.layers[layer]
        return entry.percent[entry.tags.index(tag)]

    def rows(self) -> list[tuple[int, str, float, float, float]]:
        """``(layer, tag, raw, normalized, percent)`` sorted by layer, then tag."""
        out = []
        for entry in self.layers:
            for index in sorted(range(len(entry.tags)), key=lambda i: entry.tags[i]):
                out.append(
                    (entry.layer, entry.tags[index], entry.raw[index], entry.normalized[index], entry.percent[index])
                )
        return out


def _check_consistent(samples: Sequence[SampleAttention]) -> tuple[tuple[str, ...], int]:
    if not samples:
        raise UsageError("no captured samples to aggregate", error_code="CAPTURE_EMPTY")
    tags, layers = samples[0].tags, samples[0].num_layers
    for sample in samples[1:]:
        if sample.tags != tags or sample.num_layers != layers:
            raise UsageError(
                f"sample '{sample.sample_id}' was captured over {sample.tags} x {sample.num_layers} layers, "
                f"expected {tags} x {layers}",
                error_code="CAPTURE_INCONSISTENT",
                context=create_error_context(component="attnlab"),
            )
    return tags, layers


def aggregate_scores(samples: Sequence[SampleAttention]) -> ScoreTable:
    tags, _ = _check_consistent(samples)
    flat = np.concatenate([sample.weights for sample in samples], axis=1)
    return ScoreTable(
        tags=tags,
        means=flat.mean(axis=1),
        sample_count=len(samples),
        token_count=int(flat.shape[1]),
    )


def _min_max(values: np.ndarray) -> tuple[np.ndarray, bool]:
    low, high = float(values.min()), float(values.max())
    if high == low:
        return np.zeros_like(values), True
    return (values - low) / (high - low), False


def _shares(normalized: np.ndarray, degenerate: bool) -> np.ndarray:
    total = float(normalized.sum())
    if degenerate or total == 0.0:
        return np.full(normalized.shape, 100.0 / normalized.size)
    return normalized / total * 100.0


def contribution_percentages(
    means: Sequence[float],
    tags: Sequence[str],
    layer: int = 0,
) -> LayerContribution:
    """Min-max normalize one layer's means, then turn them into shares of 100.

    When every mean is equal the normalized scores are all zero and each
    adapter gets ``100 / N``; ``degenerate`` marks that case.

    Examples
    --------
    >>> [round(p, 2) for p in contribution_percentages([2.0, 4.0, 6.0], ["a", "b", "c"]).percent]
    [0.0, 33.33, 66.67]

    """
    raw = np.asarray(means, dtype=np.float64)
    if raw.size == 0 or raw.size != len(tags):
        raise UsageError(
            f"{raw.size} scores for {len(tags)} adapter tags", error_code="CONTRIBUTION_SHAPE"
        )
    normalized, degenerate = _min_max(raw)
    percent = _shares(normalized, degenerate)
    return LayerContribution(
        layer=layer,
        tags=tuple(tags),
        raw=tuple(float(v) for v in raw),
        normalized=tuple(float(v) for v in normalized),
        percent=tuple(float(v) for v in percent),
        degenerate=degenerate,
    )


def build_trace(samples: Sequence[SampleAttention], order: Order = "aggregate_then_normalize") -> AttentionTrace:
    table = aggregate_scores(samples)
    if order == "aggregate_then_normalize":
        layers = tuple(
            contribution_percentages(row, table.tags, index) for index, row in enumerate(table.means)
        )
    elif order == "normalize_then_aggregate":
        layers = tuple(_normalized_first(samples, table, index) for index in range(table.means.shape[0]))
    else:
        raise UsageError(f"unknown aggregation order '{order}'", error_code="UNKNOWN_ORDER")
    for entry in layers:
        if entry.degenerate:
            logger.warning("layer %d: all adapters scored equally, using equal shares", entry.layer)
    return AttentionTrace(layers, table.sample_count, table.token_count, order)


def _normalized_first(samples: Sequence[SampleAttention], table: ScoreTable, layer: int) -> LayerContribution:
    per_sample = [_min_max(sample.weights[layer].mean(axis=0)) for sample in samples]
    normalized = np.mean([values for values, _ in per_sample], axis=0)
    degenerate = all(flag for _, flag in per_sample)
    percent = _shares(normalized, degenerate)
    return LayerContribution(
        layer=layer,
        tags=table.tags,
        raw=tuple(float(v) for v in table.means[layer]),
        normalized=tuple(float(v) for v in normalized),
        percent=tuple(float(v) for v in percent),
        degenerate=degenerate or float(normalized.sum()) == 0.0,
    )


def token_heatmap(samples: Sequence[SampleAttention], layer: int | None = None) -> np.ndarray:
    """``[tokens x adapters]`` raw fusion weights of a single sample.

    ``layer=None`` averages the per-layer matrices.
    """
    if len(samples) != 1:
        raise UsageError(
            f"a token heatmap needs exactly one sample, got {len(samples)}", error_code="HEATMAP_MULTI_SAMPLE"
        )
    weights = samples[0].weights
    if layer is None:
        return weights.mean(axis=0)
    if not 0 <= layer < weights.shape[0]:
        raise UsageError(f"layer {layer} outside 0..{weights.shape[0] - 1}", error_code="HEATMAP_LAYER")
    return weights[layer].copy()
