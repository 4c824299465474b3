"""Text-similarity and token-overlap scores for generated targets."""

from peft_fusion.metrics.bleu import corpus_bleu4, ngram_counts, smooth_bleu4
from peft_fusion.metrics.prf import split_subtokens, token_prf
from peft_fusion.metrics.report import (
    METRIC_NAMES,
    EvaluationResult,
    MetricReport,
    Prediction,
    check_metric_names,
    evaluate_predictions,
    pair_predictions,
)
from peft_fusion.metrics.rouge import lcs_length, rouge_l

__all__ = [
    "METRIC_NAMES",
    "EvaluationResult",
    "MetricReport",
    "Prediction",
    "check_metric_names",
    "corpus_bleu4",
    "evaluate_predictions",
    "lcs_length",
    "ngram_counts",
    "pair_predictions",
    "rouge_l",
    "smooth_bleu4",
    "split_subtokens",
    "token_prf",
]
