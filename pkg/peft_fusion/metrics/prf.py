from __future__ import annotations

import re
from collections import Counter
from collections.abc import Sequence

_SEPARATORS = re.compile(r"[^0-9A-Za-z]+")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_subtokens(tokens: Sequence[str]) -> list[str]:
    """Split identifiers on snake_case, camelCase and punctuation; lowercase the parts.

    Examples
    --------
    >>> split_subtokens(["getUserName", "max_len"])
    ['get', 'user', 'name', 'max', 'len']

    """
    parts: list[str] = []
    for token in tokens:
        for chunk in _SEPARATORS.split(token):
            parts.extend(piece.lower() for piece in _CAMEL.findall(chunk))
    return parts


def token_prf(predicted: Sequence[str], truth: Sequence[str]) -> tuple[float, float, float]:
    """Multiset precision, recall and F1 in [0, 1]."""
    tp = sum((Counter(predicted) & Counter(truth)).values())
    precision = tp / len(predicted) if predicted else 0.0
    recall = tp / len(truth) if truth else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)
