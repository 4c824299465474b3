from __future__ import annotations

import logging
from pathlib import Path
from typing import IO, Any

from peft_fusion.exceptions import BaseError
from peft_fusion.serializers import BaseSerializer, default_serializer
from peft_fusion.typed import TrainingEvent

logger = logging.getLogger(__name__)


class EventLog:
    """Line-delimited training events, kept in memory and optionally mirrored to a file."""

    def __init__(self, path: Path | None = None, serializer: BaseSerializer | None = None):
        self.path = Path(path) if path is not None else None
        self.serializer = serializer or default_serializer()
        self.events: list[TrainingEvent] = []
        self._handle: IO[bytes] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("wb")

    def append(self, event: TrainingEvent) -> None:
        self.events.append(event)
        self._write_record(event.to_dict())
        if event.event == "step":
            logger.debug(
                "step %d epoch %d %s loss=%.6f", event.step, event.epoch, event.phase.value, event.loss or 0.0
            )
        else:
            logger.info("%s: epoch %d, %s, loss=%s", event.event, event.epoch, event.phase.value, event.loss)

    def of_kind(self, kind: str) -> list[TrainingEvent]:
        return [event for event in self.events if event.event == kind]

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> EventLog:
        return self

    def _write_record(self, record: dict[str, Any]) -> None:
        if self._handle is not None:
            self._handle.write(self.serializer.dumps(record) + b"\n")
            self._handle.flush()

    def mark(self, event: str, **fields: Any) -> None:
        """Write a run boundary record (``run_start``/``run_end``) next to the training events."""
        self._write_record({"type": "run", "event": event, **fields})
        logger.debug("%s %s", event, fields)

    def record_error(self, error: BaseError) -> None:
        """Close the file with the error that aborted the run."""
        self._write_record(error.to_response().to_dict())

    def __exit__(self, exc_type: object, exc: BaseException | None, tb: object) -> None:
        if isinstance(exc, BaseError):
            self.record_error(exc)
        self.close()

    @classmethod
    def read(cls, path: Path, serializer: BaseSerializer | None = None) -> list[TrainingEvent]:
        serializer = serializer or default_serializer()
        records = (serializer.loads(line) for _, line in serializer.iter_lines(path))
        return [TrainingEvent.from_dict(record) for record in records if "type" not in record]
