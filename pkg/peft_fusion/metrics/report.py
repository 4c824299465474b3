from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from peft_fusion.config import EvaluationConfig
from peft_fusion.corpus import Sample, tokenize
from peft_fusion.exceptions import DataError, UsageError
from peft_fusion.metrics.bleu import corpus_bleu4, smooth_bleu4
from peft_fusion.metrics.prf import split_subtokens, token_prf
from peft_fusion.metrics.rouge import rouge_l
from peft_fusion.serializers import BaseSerializer, default_serializer
from peft_fusion.utils.batching import map_ordered

logger = logging.getLogger(__name__)

METRIC_NAMES = ("bleu4", "rougeL", "prf")
PRF_PARTS = ("precision", "recall", "f1")


def check_metric_names(names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(names)
    unknown = [name for name in names if name not in METRIC_NAMES]
    if unknown:
        raise UsageError(
            f"unknown metric '{unknown[0]}' (choose from {', '.join(METRIC_NAMES)})",
            error_code="UNKNOWN_METRIC",
        )
    if not names:
        raise UsageError("no metric requested", error_code="UNKNOWN_METRIC")
    return names


@dataclass(frozen=True, slots=True)
class Prediction:
    id: str
    language: str
    prediction: str
    reference: str


@dataclass(frozen=True)
class MetricReport:
    """Per-sample scores of one metric and their mean.

    ``corpus_score`` is only set for corpus-level BLEU; ``aggregate`` is always
    the arithmetic mean of ``scores``.
    """

    name: str
    scores: tuple[float, ...]
    params: dict[str, Any] = field(default_factory=dict)
    corpus_score: float | None = None

    @property
    def aggregate(self) -> float:
        return sum(self.scores) / len(self.scores) if self.scores else 0.0

    @property
    def headline(self) -> float:
        return self.aggregate if self.corpus_score is None else self.corpus_score

    def to_dict(self) -> dict[str, Any]:
        return {
            "aggregate": self.aggregate,
            "corpus": self.corpus_score,
            "count": len(self.scores),
            "params": dict(self.params),
        }


@dataclass(frozen=True)
class EvaluationResult:
    predictions: tuple[Prediction, ...]
    overall: dict[str, MetricReport]
    per_language: dict[str, dict[str, MetricReport]]

    def headline(self, name: str, language: str | None = None) -> float:
        reports = self.overall if language is None else self.per_language[language]
        return reports[name].headline

    def records(self) -> list[dict[str, Any]]:
        """One summary record followed by one record per sample."""
        summary = {
            "record": "summary",
            "metrics": {name: report.to_dict() for name, report in self.overall.items()},
            "languages": {
                language: {name: report.to_dict() for name, report in reports.items()}
                for language, reports in sorted(self.per_language.items())
            },
        }
        rows = [summary]
        for index, item in enumerate(self.predictions):
            rows.append(
                {
                    "record": "sample",
                    "id": item.id,
                    "language": item.language,
                    "prediction": item.prediction,
                    "reference": item.reference,
                    "scores": {name: report.scores[index] for name, report in self.overall.items()},
                }
            )
        return rows

    def write(self, path: Path, serializer: BaseSerializer | None = None) -> Path:
        serializer = serializer or default_serializer()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        serializer.write_lines(path, self.records())
        logger.info("wrote metric report for %d samples to %s", len(self.predictions), path)
        return path


def _subtokens(text: str, splitter: str) -> list[str]:
    return split_subtokens(tokenize(text)) if splitter == "subtoken" else text.split()


def _score_one(item: Prediction, names: tuple[str, ...], config: EvaluationConfig) -> dict[str, float]:
    candidate = tokenize(item.prediction)
    reference = tokenize(item.reference)
    scores: dict[str, float] = {}
    if "bleu4" in names:
        scores["bleu4"] = smooth_bleu4(candidate, reference, config.bleu_smoothing)
    if "rougeL" in names:
        scores["rougeL"] = rouge_l(candidate, reference, config.rouge_beta)
    if "prf" in names:
        predicted = _subtokens(item.prediction, config.prf_splitter)
        truth = _subtokens(item.reference, config.prf_splitter)
        scores["prf.precision"], scores["prf.recall"], scores["prf.f1"] = token_prf(predicted, truth)
    return scores


def _reports(
    items: Sequence[Prediction],
    rows: Sequence[dict[str, float]],
    names: tuple[str, ...],
    config: EvaluationConfig,
) -> dict[str, MetricReport]:
    reports: dict[str, MetricReport] = {}
    for key in rows[0] if rows else ():
        params: dict[str, Any] = {}
        corpus = None
        if key == "bleu4":
            params = {"smoothing": config.bleu_smoothing, "mode": config.bleu_mode}
            if config.bleu_mode == "corpus":
                corpus = corpus_bleu4(
                    [tokenize(item.prediction) for item in items],
                    [tokenize(item.reference) for item in items],
                    config.bleu_smoothing,
                )
        elif key == "rougeL":
            params = {"beta": config.rouge_beta}
        elif key.startswith("prf."):
            params = {"splitter": config.prf_splitter}
        reports[key] = MetricReport(key, tuple(row[key] for row in rows), params, corpus)
    return reports


def evaluate_predictions(
    predictions: Sequence[Prediction],
    config: EvaluationConfig | None = None,
    metrics: Iterable[str] | None = None,
    max_workers: int = 4,
) -> EvaluationResult:
    """Score every prediction, then aggregate overall and per language."""
    config = config or EvaluationConfig()
    names = check_metric_names(config.metrics if metrics is None else metrics)
    if not predictions:
        raise DataError("nothing to evaluate", error_code="CORPUS_EMPTY")
    items = tuple(predictions)
    rows = map_ordered(lambda item: _score_one(item, names, config), items, max_workers=max_workers)
    overall = _reports(items, rows, names, config)
    per_language: dict[str, dict[str, MetricReport]] = {}
    for language in sorted({item.language for item in items}):
        picked = [index for index, item in enumerate(items) if item.language == language]
        per_language[language] = _reports(
            [items[index] for index in picked], [rows[index] for index in picked], names, config
        )
    return EvaluationResult(predictions=items, overall=overall, per_language=per_language)


def pair_predictions(generated: Sequence[Sample], references: Sequence[Sample]) -> list[Prediction]:
    """Join a predictions file (corpus format, ``target`` holds the output) with the references by id."""
    by_id = {sample.id: sample for sample in generated}
    pairs = []
    for reference in references:
        if reference.id not in by_id:
            raise DataError(f"no prediction for sample '{reference.id}'", error_code="PREDICTION_MISSING")
        pairs.append(Prediction(reference.id, reference.language, by_id[reference.id].target, reference.target))
    return pairs
