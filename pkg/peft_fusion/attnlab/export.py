from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from peft_fusion.attnlab.trace import AttentionTrace
from peft_fusion.exceptions import DataError, ShapeError, create_error_context

logger = logging.getLogger(__name__)

TRACE_HEADER = ("layer", "tag", "raw", "normalized", "percent")


def _num(value: float) -> str:
    return format(value, ".12g")


@dataclass(frozen=True, slots=True)
class TraceRow:
    layer: int
    tag: str
    raw: float
    normalized: float
    percent: float


def export_trace(trace: AttentionTrace, path: Path) -> Path:
    """Write one CSV row per ``(layer, tag)``, values at 12 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for layer, tag, raw, normalized, percent in trace.rows():
            writer.writerow((layer, tag, _num(raw), _num(normalized), _num(percent)))
    logger.info("wrote attention trace (%d layers) to %s", len(trace.layers), path)
    return path


def read_trace(path: Path) -> list[TraceRow]:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_HEADER:
            raise DataError(f"{path} is not an attention trace", error_code="TRACE_HEADER", line=1)
        rows = []
        for number, record in enumerate(reader, 2):
            try:
                layer, tag, raw, normalized, percent = record
                rows.append(TraceRow(int(layer), tag, float(raw), float(normalized), float(percent)))
            except ValueError as exc:
                raise DataError(f"malformed trace row: {exc}", error_code="TRACE_ROW", line=number) from exc
    return rows


def export_comparison(traces: Mapping[str, AttentionTrace], path: Path) -> Path:
    """Side-by-side percentage shares of several traces over the same adapters."""
    labels = list(traces)
    rows = {label: {(layer, tag): pct for layer, tag, _, _, pct in trace.rows()} for label, trace in traces.items()}
    keys = sorted(set().union(*(set(table) for table in rows.values()))) if rows else []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("layer", "tag", *labels))
        for layer, tag in keys:
            writer.writerow((layer, tag, *(_num(rows[label].get((layer, tag), 0.0)) for label in labels)))
    return path


def export_heatmap(matrix: np.ndarray, tokens: Sequence[str], tags: Sequence[str], path: Path) -> Path:
    """Per-token fusion weights: one row per position, one column per adapter."""
    if matrix.shape != (len(tokens), len(tags)):
        raise ShapeError(
            f"heatmap {matrix.shape} does not match {len(tokens)} tokens x {len(tags)} adapters",
            context=create_error_context(component="attnlab"),
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("position", "token", *tags))
        for position, (token, row) in enumerate(zip(tokens, matrix, strict=True)):
            writer.writerow((position, token, *(_num(float(v)) for v in row)))
    return path
