from __future__ import annotations

import contextlib
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from peft_fusion.exceptions import UsageError, create_error_context

if TYPE_CHECKING:
    from peft_fusion.fusion.stack import FusionStack


@dataclass(slots=True)
class SampleAttention:
    """Fusion weights of one sample: ``weights[l, t, n]`` over the full adapter order."""

    sample_id: str
    language: str | None
    tags: tuple[str, ...]
    weights: np.ndarray

    @property
    def num_layers(self) -> int:
        return int(self.weights.shape[0])


class AttentionCapture:
    """Passive recorder of per-layer fusion weights, one sample at a time.

    Recording copies the weight values and never touches the tape, so a
    captured forward pass produces the same outputs as an uncaptured one.
    """

    def __init__(self, adapter_order: Sequence[str], num_layers: int):
        self.adapter_order = tuple(adapter_order)
        self.num_layers = num_layers
        self.samples: list[SampleAttention] = []
        self._pending: dict[int, np.ndarray] = {}
        self._sample_id: str | None = None
        self._language: str | None = None

    def begin_sample(self, sample_id: str, language: str | None = None) -> None:
        self._flush()
        self._sample_id = sample_id
        self._language = language

    def record(self, layer_index: int, weights: np.ndarray) -> None:
        if self._sample_id is None:
            self._sample_id = str(len(self.samples))
        if layer_index in self._pending:
            # another forward pass without begin_sample: treat it as a new sample
            self._flush()
            self._sample_id = str(len(self.samples))
        self._pending[layer_index] = np.array(weights, dtype=np.float64)

    def _flush(self) -> None:
        if not self._pending:
            return
        missing = sorted(set(range(self.num_layers)) - set(self._pending))
        if missing:
            raise UsageError(
                f"sample '{self._sample_id}' has no fusion weights for layer(s) {missing}",
                error_code="CAPTURE_INCOMPLETE",
                context=create_error_context(component="fusion.capture", layers=missing),
            )
        stacked = np.stack([self._pending[layer] for layer in range(self.num_layers)])
        self.samples.append(
            SampleAttention(
                sample_id=self._sample_id or str(len(self.samples)),
                language=self._language,
                tags=self.adapter_order,
                weights=stacked,
            )
        )
        self._pending = {}
        self._sample_id = None
        self._language = None

    def finish(self) -> list[SampleAttention]:
        """Close the last sample and return every captured sample."""
        self._flush()
        if not self.samples:
            raise UsageError(
                "attention capture requested but no fusion block ran",
                error_code="CAPTURE_EMPTY",
                context=create_error_context(component="fusion.capture"),
            )
        return list(self.samples)


@contextlib.contextmanager
def capture_attention(stack: FusionStack) -> Iterator[AttentionCapture]:
    """Attach one capture to every block of ``stack`` for the duration of the block.

    Examples
    --------
    >>> with capture_attention(stack) as capture:
    ...     capture.begin_sample("s1", "ruby")
    ...     backbone.forward(tokens, stack.plugins(adapter_sets))
    >>> samples = capture.finish()

    """
    capture = AttentionCapture(stack.adapter_order, len(stack.blocks))
    for block in stack.blocks:
        block.capture = capture
    try:
        yield capture
    finally:
        for block in stack.blocks:
            block.capture = None
