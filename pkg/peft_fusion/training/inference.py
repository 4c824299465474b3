from __future__ import annotations

import logging
from collections.abc import Sequence

from peft_fusion.corpus import EOS, Sample, Vocabulary, decode, encode
from peft_fusion.exceptions import UsageError
from peft_fusion.fusion import SampleAttention, capture_attention
from peft_fusion.metrics.report import Prediction
from peft_fusion.numcore import no_grad
from peft_fusion.training.bundle import ModelBundle

logger = logging.getLogger(__name__)


def generate_predictions(
    bundle: ModelBundle,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    max_new_tokens: int,
) -> list[Prediction]:
    """Greedy-decode every sample from its ``[bos, input, sep]`` prompt."""
    backbone = bundle.backbone
    plugins = bundle.plugins()
    predictions = []
    for sample in samples:
        prompt = encode(sample, vocab, backbone.config.max_seq_len).prompt
        sequence = backbone.generate_greedy(prompt, max_new_tokens, EOS, plugins)
        generated = sequence[len(prompt) :]
        if generated and generated[-1] == EOS:
            generated = generated[:-1]
        predictions.append(Prediction(sample.id, sample.language, decode(generated, vocab), sample.target))
    logger.info("generated %d predictions", len(predictions))
    return predictions


def trace_attention(bundle: ModelBundle, samples: Sequence[Sample], vocab: Vocabulary) -> list[SampleAttention]:
    """Record fusion weights of every sample's full encoded sequence."""
    if bundle.fusion is None:
        raise UsageError("attention analysis needs a fusion checkpoint", error_code="NOT_A_FUSION_CHECKPOINT")
    plugins = bundle.plugins()
    max_len = bundle.backbone.config.max_seq_len
    with no_grad(), capture_attention(bundle.fusion) as capture:
        for sample in samples:
            capture.begin_sample(sample.id, sample.language)
            bundle.backbone.forward(encode(sample, vocab, max_len).ids, plugins)
        return capture.finish()
