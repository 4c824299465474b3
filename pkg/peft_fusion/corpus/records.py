from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from peft_fusion.config import DEFAULT_SPLIT_COUNTS
from peft_fusion.exceptions import DataError, create_error_context
from peft_fusion.numcore import derive_rng
from peft_fusion.serializers import BaseSerializer, default_serializer

logger = logging.getLogger(__name__)

SAMPLE_FIELDS = ("id", "language", "input", "target")


@dataclass(frozen=True, slots=True)
class Sample:
    """One paired record: ``input`` is the prompt, ``target`` the text to generate."""

    id: str
    language: str
    input: str
    target: str

    def __post_init__(self) -> None:
        for name in SAMPLE_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise DataError(
                    f"field '{name}' must be a non-empty string",
                    error_code="SAMPLE_FIELD_EMPTY",
                    context=create_error_context(component="corpus", field=name),
                )

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "language": self.language, "input": self.input, "target": self.target}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> Sample:
        missing = [name for name in SAMPLE_FIELDS if name not in payload]
        if missing:
            raise DataError(
                f"record is missing field(s) {missing}",
                error_code="SAMPLE_FIELD_MISSING",
                context=create_error_context(component="corpus", missing=missing),
            )
        return cls(**{name: payload[name] for name in SAMPLE_FIELDS})


def load_corpus(path: Path, serializer: BaseSerializer | None = None) -> list[Sample]:
    """Read and validate a JSON-lines corpus.

    Raises
    ------
    DataError
        On a malformed line or invalid record (the error names the line) and
        on a duplicate ``id``.

    """
    serializer = serializer or default_serializer()
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}", error_code="CORPUS_NOT_FOUND")
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for line_no, line in serializer.iter_lines(path):
        try:
            payload = serializer.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{line_no}: not valid JSON ({exc})", line=line_no) from exc
        if not isinstance(payload, dict):
            raise DataError(f"{path}:{line_no}: record must be an object", line=line_no)
        unknown = sorted(set(payload) - set(SAMPLE_FIELDS))
        if unknown:
            logger.warning("%s:%d: ignoring unknown field(s) %s", path, line_no, unknown)
        try:
            sample = Sample.from_dict(payload)
        except DataError as exc:
            raise DataError(f"{path}:{line_no}: {exc.message}", error_code=exc.error_code, line=line_no) from exc
        if sample.id in seen:
            raise DataError(
                f"{path}:{line_no}: duplicate id '{sample.id}' (first seen on line {seen[sample.id]})",
                error_code="SAMPLE_DUPLICATE_ID",
                line=line_no,
            )
        seen[sample.id] = line_no
        samples.append(sample)
    counts = language_counts(samples)
    logger.info(
        "loaded %d samples from %s (%s)",
        len(samples),
        path,
        ", ".join(f"{lang}={n}" for lang, n in counts.items()),
    )
    return samples


def save_corpus(path: Path, samples: Iterable[Sample], serializer: BaseSerializer | None = None) -> None:
    serializer = serializer or default_serializer()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    serializer.write_lines(path, (sample.to_dict() for sample in samples))


def language_counts(samples: Iterable[Sample]) -> dict[str, int]:
    counts = Counter(sample.language for sample in samples)
    return dict(sorted(counts.items()))


def by_language(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    """Partition samples per language, keeping corpus order inside each part."""
    parts: dict[str, list[Sample]] = {}
    for sample in samples:
        parts.setdefault(sample.language, []).append(sample)
    return dict(sorted(parts.items()))


def split_corpus(
    samples: Sequence[Sample],
    seed: int,
    counts: tuple[int, int, int] = DEFAULT_SPLIT_COUNTS,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Seeded train/valid/test split in the ratio of ``counts``.

    For corpora shipped without splits. Valid and test sizes are rounded
    from the ratio; train takes the remainder.
    """
    if not samples:
        raise DataError("cannot split an empty corpus", error_code="CORPUS_EMPTY")
    total = sum(counts)
    if total <= 0 or any(count < 0 for count in counts):
        raise DataError(f"invalid split counts {counts}", error_code="SPLIT_COUNTS_INVALID")
    order = derive_rng(seed, "split").permutation(len(samples))
    n = len(samples)
    n_valid = int(round(n * counts[1] / total))
    n_test = int(round(n * counts[2] / total))
    n_train = max(0, n - n_valid - n_test)
    shuffled = [samples[int(i)] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )


def corpus_stats(splits: dict[str, Sequence[Sample]]) -> dict[str, dict[str, int]]:
    """Per-language sample counts for each named split."""
    languages = sorted({sample.language for part in splits.values() for sample in part})
    table: dict[str, dict[str, int]] = {}
    for language in languages:
        table[language] = {
            name: sum(1 for sample in part if sample.language == language)
            for name, part in splits.items()
        }
    return table
