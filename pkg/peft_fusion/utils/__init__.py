"""Utility modules for the laboratory."""

from .batching import Prefetcher, batch_items, map_ordered, round_robin
from .logging import configure_logging

__all__ = [
    "Prefetcher",
    "batch_items",
    "configure_logging",
    "map_ordered",
    "round_robin",
]
