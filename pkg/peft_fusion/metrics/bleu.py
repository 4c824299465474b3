from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence

MAX_ORDER = 4


def ngram_counts(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _matches(candidate: Sequence[str], reference: Sequence[str], n: int) -> tuple[int, int]:
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    clipped = sum(min(count, ref[gram]) for gram, count in cand.items())
    return clipped, max(len(candidate) - n + 1, 0)


def _combine(
    matches: Sequence[int],
    totals: Sequence[int],
    cand_len: int,
    ref_len: int,
    smoothing: str,
) -> float:
    if cand_len == 0 or ref_len == 0 or matches[0] == 0:
        return 0.0
    log_sum = 0.0
    for n, (hit, total) in enumerate(zip(matches, totals, strict=True), 1):
        if smoothing == "add_one" and n >= 2:
            hit, total = hit + 1, total + 1
        if hit == 0 or total == 0:
            return 0.0
        log_sum += math.log(hit / total)
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_sum / len(matches))


def smooth_bleu4(candidate: Sequence[str], reference: Sequence[str], smoothing: str = "add_one") -> float:
    """Sentence BLEU-4 in [0, 100].

    ``add_one`` smoothing adds one to the matched and total counts of every
    order from 2 up; unigram precision is never smoothed, so a candidate with
    no unigram in the reference scores 0.

    Examples
    --------
    >>> round(smooth_bleu4("a b c d".split(), "a b c d e".split()), 2)
    77.88

    """
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hit, total = _matches(candidate, reference, n)
        matches.append(hit)
        totals.append(total)
    return _combine(matches, totals, len(candidate), len(reference), smoothing)


def corpus_bleu4(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    smoothing: str = "add_one",
) -> float:
    """Corpus BLEU-4: n-gram counts and lengths pooled before the geometric mean."""
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    cand_len = ref_len = 0
    for candidate, reference in zip(candidates, references, strict=True):
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, MAX_ORDER + 1):
            hit, total = _matches(candidate, reference, n)
            matches[n - 1] += hit
            totals[n - 1] += total
    return _combine(matches, totals, cand_len, ref_len, smoothing)
