from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any


class BaseSerializer(ABC):
    """Abstract serializer interface.

    Every structured file the laboratory writes (corpus JSONL, event logs,
    metric reports, checkpoint manifests) goes through one of these, and every
    implementation must emit keys in sorted order so that files are
    byte-reproducible.
    """

    @abstractmethod
    def dumps(self, data: Any) -> bytes:
        """Serialize Python data into UTF-8 bytes."""
        raise NotImplementedError

    @abstractmethod
    def loads(self, data: bytes | str) -> Any:
        """Deserialize data produced by dumps back into Python objects."""
        raise NotImplementedError

    def dumps_lines(self, records: Iterable[Any]) -> bytes:
        return b"".join(self.dumps(record) + b"\n" for record in records)

    def write_lines(self, path: Path, records: Iterable[Any]) -> None:
        Path(path).write_bytes(self.dumps_lines(records))

    def iter_lines(self, path: Path) -> Iterator[tuple[int, str]]:
        """Yield ``(line_number, raw_line)`` for every non-blank line, 1-based."""
        with Path(path).open(encoding="utf-8") as handle:
            for number, line in enumerate(handle, 1):
                if line.strip():
                    yield number, line
