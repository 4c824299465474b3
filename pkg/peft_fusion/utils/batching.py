"""Utilities for batch composition, bounded read-ahead, and parallel scoring.

Training consumes batches from a single thread; encoding can run ahead of it
on a worker thread through :class:`Prefetcher`, whose bounded queue keeps
at most ``depth`` batches in flight and preserves order.
"""

import logging
import queue
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from typing import Any, Generic, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)

_DONE = object()


def batch_items(
    items: Iterable[T], batch_size: int, strict: bool = False
) -> Iterator[tuple[T, ...]]:
    """Split an iterable into batches of specified size.

    Parameters
    ----------
    items : Iterable[T]
        Items to split into batches
    batch_size : int
        Maximum number of items per batch
    strict : bool, optional
        Raise if the last batch is incomplete. Default: False

    Yields
    ------
    tuple[T, ...]
        Batch of items (last batch may be smaller)

    Examples
    --------
    >>> list(batch_items([1, 2, 3, 4, 5], batch_size=2))
    [(1, 2), (3, 4), (5,)]

    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least one")
    iterator = iter(items)
    while batch := tuple(islice(iterator, batch_size)):
        if strict and len(batch) != batch_size:
            raise ValueError("batch_items(): incomplete batch")
        yield batch


def round_robin(groups: Sequence[tuple[str, Sequence[T]]]) -> Iterator[tuple[str, T]]:
    """Interleave per-key sequences one element at a time, skipping exhausted keys.

    Examples
    --------
    >>> list(round_robin([("a", [1, 2, 3]), ("b", [9])]))
    [('a', 1), ('b', 9), ('a', 2), ('a', 3)]

    """
    longest = max((len(items) for _, items in groups), default=0)
    for position in range(longest):
        for key, items in groups:
            if position < len(items):
                yield key, items[position]


@dataclass
class Prefetcher(Generic[T]):
    """Run a producer iterator on a worker thread behind a bounded queue.

    Parameters
    ----------
    source : Iterable[T]
        Items to produce (typically encoded batches)
    depth : int, optional
        Maximum number of produced items waiting for the consumer. Default: 4

    Examples
    --------
    >>> with Prefetcher(encode_batches(samples), depth=4) as batches:
    ...     for batch in batches:
    ...         train_step(batch)

    """

    source: Iterable[T]
    depth: int = 4
    _queue: queue.Queue = field(init=False)
    _thread: threading.Thread | None = field(default=None, init=False)
    _stop: threading.Event = field(default_factory=threading.Event, init=False)

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be at least one")
        self._queue = queue.Queue(maxsize=self.depth)

    def _produce(self) -> None:
        try:
            for item in self.source:
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as exc:  # noqa: BLE001
            self._queue.put(exc)
            return
        self._queue.put(_DONE)

    def __enter__(self) -> "Prefetcher[T]":
        self._thread = threading.Thread(target=self._produce, name="prefetch", daemon=True)
        self._thread.start()
        return self

    def __iter__(self) -> Iterator[T]:
        if self._thread is None:
            self.__enter__()
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None


def map_ordered(fn: Callable[[T], R], items: Iterable[T], max_workers: int = 4) -> list[R]:
    """Apply a pure function to every item on a thread pool, keeping input order."""
    items = list(items)
    if max_workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
