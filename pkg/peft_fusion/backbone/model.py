from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from peft_fusion.backbone.plugins import PROJECTION_TARGETS, LayerPlugins
from peft_fusion.config import BackboneConfig
from peft_fusion.exceptions import ConfigError, ShapeError, UsageError, create_error_context
from peft_fusion.numcore import Module, Tensor, derive_rng, gaussian, no_grad, ops

if TYPE_CHECKING:
    from peft_fusion.fusion.block import FusionOutput

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class LayerState:
    """Per-layer observables of one forward pass.

    ``h`` is the feed-forward output (the fusion query), ``r`` the residual the
    slot adds back (taken before the layer norm, so it equals ``h``), and
    ``adapter_outputs`` the ``z_{l,n}`` of every adapter that ran.
    """

    h: Tensor
    r: Tensor
    slot_output: Tensor
    adapter_outputs: dict[str, Tensor] = field(default_factory=dict)
    fusion: FusionOutput | None = None


@dataclass(slots=True)
class ForwardResult:
    logits: Tensor
    layer_states: list[LayerState]


class DecoderLayer(Module):
    """Post-layer-norm decoder block with one adapter slot after the feed-forward sub-layer."""

    def __init__(self, config: BackboneConfig, index: int, seed: int):
        super().__init__()
        self.config = config
        self.index = index
        h, f = config.hidden_size, config.ffn_size
        for target in PROJECTION_TARGETS:
            rng = derive_rng(seed, "backbone", index, target)
            self.register_parameter(f"attn.{target}.weight", gaussian(rng, (h, h), config.init_std))
            self.register_parameter(f"attn.{target}.bias", np.zeros(h))
        self.register_parameter("ln1.gamma", np.ones(h))
        self.register_parameter("ln1.beta", np.zeros(h))
        rng = derive_rng(seed, "backbone", index, "ffn")
        self.register_parameter("ffn.in.weight", gaussian(rng, (h, f), config.init_std))
        self.register_parameter("ffn.in.bias", np.zeros(f))
        self.register_parameter("ffn.out.weight", gaussian(rng, (f, h), config.init_std))
        self.register_parameter("ffn.out.bias", np.zeros(h))
        self.register_parameter("ln2.gamma", np.ones(h))
        self.register_parameter("ln2.beta", np.zeros(h))

    def param(self, name: str) -> Tensor:
        return self._parameters[name]

    def _project(self, target: str, x: Tensor, plugins: LayerPlugins) -> Tensor:
        weight = self.param(f"attn.{target}.weight")
        bias = self.param(f"attn.{target}.bias")
        adapter = plugins.projections.get(target)
        if adapter is not None:
            return adapter(x, weight, bias)
        return ops.linear(x, weight, bias)

    def attention(self, x: Tensor, plugins: LayerPlugins) -> Tensor:
        seq_len = x.shape[0]
        head_dim = self.config.head_dim
        causal = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
        q = self._project("query", x, plugins)
        k = self._project("key", x, plugins)
        v = self._project("value", x, plugins)
        heads = []
        for head in range(self.config.num_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            qh = ops.slice_columns(q, lo, hi)
            kh = ops.slice_columns(k, lo, hi)
            vh = ops.slice_columns(v, lo, hi)
            scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), 1.0 / math.sqrt(head_dim))
            heads.append(ops.matmul(ops.softmax(scores, axis=1, mask=causal), vh))
        context = heads[0] if len(heads) == 1 else ops.concat(heads, axis=1)
        return self._project("out", context, plugins)

    def forward(self, x: Tensor, plugins: LayerPlugins) -> tuple[Tensor, LayerState]:
        eps = self.config.layer_norm_eps
        x1 = ops.layer_norm(
            ops.add(x, self.attention(x, plugins)), self.param("ln1.gamma"), self.param("ln1.beta"), eps
        )
        inner = ops.relu(ops.linear(x1, self.param("ffn.in.weight"), self.param("ffn.in.bias")))
        h = ops.linear(inner, self.param("ffn.out.weight"), self.param("ffn.out.bias"))
        r = h
        adapter_outputs: dict[str, Tensor] = {}
        fusion_output = None
        if plugins.mixer is not None:
            slot, fusion_output, adapter_outputs = plugins.mixer.mix(h, r, plugins.adapters)
        elif len(plugins.adapters) == 1:
            tag, adapter = next(iter(plugins.adapters.items()))
            slot = adapter(h, r)
            adapter_outputs[tag] = slot
        elif plugins.adapters:
            raise UsageError(
                f"layer {self.index} holds {len(plugins.adapters)} slot adapters but no fusion block",
                context=create_error_context(component="backbone", layer=self.index),
            )
        else:
            slot = r
        out = ops.layer_norm(ops.add(slot, x1), self.param("ln2.gamma"), self.param("ln2.beta"), eps)
        state = LayerState(
            h=h, r=r, slot_output=slot, adapter_outputs=adapter_outputs, fusion=fusion_output
        )
        return out, state


class Backbone(Module):
    """Miniature decoder-only causal transformer.

    Its parameters ``Θ`` stay frozen during every adapter and fusion run; PEFT
    modules reach it only through per-layer :class:`LayerPlugins`.

    Parameters
    ----------
    config : BackboneConfig
        Shape of the model; ``vocab_size`` must be resolved.
    seed : int, optional
        Seed for the PCG64 initialization streams. Default: 0

    Examples
    --------
    >>> backbone = Backbone(BackboneConfig(vocab_size=32, num_layers=2, hidden_size=16,
    ...                                    num_heads=2, ffn_size=32, max_seq_len=16))
    >>> backbone.forward([1, 5, 7]).logits.shape
    (3, 32)

    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        if config.vocab_size is None:
            raise ConfigError("backbone vocab_size is not resolved", key="backbone.vocab_size")
        self.config = config
        self.seed = seed
        h = config.hidden_size
        rng = derive_rng(seed, "backbone", "embed")
        self.register_parameter("embed.token", gaussian(rng, (config.vocab_size, h), config.init_std))
        self.register_parameter("embed.position", gaussian(rng, (config.max_seq_len, h), config.init_std))
        self.layers: list[DecoderLayer] = []
        for index in range(config.num_layers):
            layer = DecoderLayer(config, index, seed)
            self.layers.append(layer)
            self.add_module(f"layers.{index}", layer)
        rng = derive_rng(seed, "backbone", "head")
        self.register_parameter("head.weight", gaussian(rng, (h, config.vocab_size), config.init_std))
        self.register_parameter("head.bias", np.zeros(config.vocab_size))

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        if len(tokens) == 0:
            raise ShapeError("token sequence is empty", context=create_error_context(component="backbone"))
        if len(tokens) > self.config.max_seq_len:
            raise ShapeError(
                f"sequence of {len(tokens)} tokens exceeds max_seq_len {self.config.max_seq_len}",
                error_code="SEQUENCE_TOO_LONG",
                context=create_error_context(component="backbone"),
            )
        bad = [t for t in tokens if not 0 <= int(t) < self.config.vocab_size]
        if bad:
            raise ShapeError(
                f"token id {bad[0]} outside vocabulary of size {self.config.vocab_size}",
                error_code="TOKEN_OUT_OF_VOCAB",
                context=create_error_context(component="backbone"),
            )

    def forward(
        self,
        tokens: Sequence[int],
        plugins: Sequence[LayerPlugins] | None = None,
    ) -> ForwardResult:
        """Run the decoder; returns ``[T x V]`` logits and per-layer states."""
        self._check_tokens(tokens)
        if plugins is not None and len(plugins) != self.config.num_layers:
            raise ShapeError(
                f"{len(plugins)} plugin sets for {self.config.num_layers} layers",
                context=create_error_context(component="backbone"),
            )
        positions = list(range(len(tokens)))
        x = ops.add(
            ops.embedding_lookup(self._parameters["embed.token"], tokens),
            ops.embedding_lookup(self._parameters["embed.position"], positions),
        )
        states = []
        for index, layer in enumerate(self.layers):
            attached = plugins[index] if plugins is not None else LayerPlugins()
            x, state = layer.forward(x, attached)
            states.append(state)
        logits = ops.linear(x, self._parameters["head.weight"], self._parameters["head.bias"])
        return ForwardResult(logits=logits, layer_states=states)

    def generate_greedy(
        self,
        prompt: Sequence[int],
        max_new: int,
        stop_token: int,
        plugins: Sequence[LayerPlugins] | None = None,
    ) -> list[int]:
        """Append the argmax token until ``stop_token`` (kept) or ``max_new`` tokens.

        Generation also stops when the sequence fills ``max_seq_len``.
        """
        if not prompt:
            raise ShapeError("prompt is empty", context=create_error_context(component="backbone"))
        if len(prompt) > self.config.max_seq_len:
            raise ShapeError(
                f"prompt of {len(prompt)} tokens exceeds max_seq_len {self.config.max_seq_len}",
                error_code="SEQUENCE_TOO_LONG",
                context=create_error_context(component="backbone"),
            )
        sequence = [int(t) for t in prompt]
        with no_grad():
            for _ in range(max_new):
                if len(sequence) >= self.config.max_seq_len:
                    break
                logits = self.forward(sequence, plugins).logits.data
                next_token = int(np.argmax(logits[-1]))
                sequence.append(next_token)
                if next_token == stop_token:
                    break
        return sequence
