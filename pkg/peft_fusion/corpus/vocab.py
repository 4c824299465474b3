from __future__ import annotations

import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from peft_fusion.corpus.records import Sample
from peft_fusion.exceptions import DataError, UsageError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
IGNORE_INDEX = -100

_TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split on whitespace, keeping runs of word characters and single punctuation marks."""
    return _TOKEN_PATTERN.findall(text)


class Vocabulary:
    """Token/id bijection with the five special tokens at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for token in tokens:
            if token in SPECIAL_TOKENS:
                continue
            self.itos.append(token)
        self.stoi: dict[str, int] = {token: index for index, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary tokens must be unique", error_code="VOCAB_DUPLICATE")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def token_ids(self, text: str) -> list[int]:
        """Ids for ``text``; out-of-vocabulary words fall back to their characters, then ``<unk>``."""
        ids: list[int] = []
        unknown = 0
        for token in tokenize(text):
            if token in self.stoi:
                ids.append(self.stoi[token])
                continue
            for char in token:
                if char in self.stoi:
                    ids.append(self.stoi[char])
                else:
                    ids.append(UNK)
                    unknown += 1
        if unknown:
            logger.debug("substituted <unk> for %d character(s) of %r", unknown, text[:40])
        return ids

    def tokens(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for index in ids:
            if skip_special and index < len(SPECIAL_TOKENS):
                continue
            out.append(self.itos[index])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> Vocabulary:
        if tuple(itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("stored vocabulary does not start with the special tokens", error_code="VOCAB_INVALID")
        return cls(itos[len(SPECIAL_TOKENS) :])


def build_vocab(samples: Iterable[Sample], max_size: int) -> Vocabulary:
    """Rank tokens by frequency, ties broken lexicographically; keep ``max_size`` ids in total."""
    if max_size < len(SPECIAL_TOKENS):
        raise UsageError(
            f"vocabulary max_size {max_size} cannot hold the {len(SPECIAL_TOKENS)} special tokens",
            error_code="VOCAB_TOO_SMALL",
        )
    counts: Counter[str] = Counter()
    seen_any = False
    for sample in samples:
        seen_any = True
        counts.update(tokenize(sample.input))
        counts.update(tokenize(sample.target))
    if not seen_any:
        raise DataError("cannot build a vocabulary from an empty corpus", error_code="CORPUS_EMPTY")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [token for token, _ in ranked if token not in SPECIAL_TOKENS]
    kept = kept[: max_size - len(SPECIAL_TOKENS)]
    logger.debug("vocabulary keeps %d of %d distinct tokens", len(kept), len(counts))
    return Vocabulary(kept)


@dataclass(slots=True)
class EncodedSample:
    """``[bos, input, sep, target, eos]`` with ``loss_mask`` true on target and eos positions."""

    ids: list[int]
    loss_mask: list[bool]
    prompt_length: int

    @property
    def prompt(self) -> list[int]:
        return self.ids[: self.prompt_length]

    @property
    def target_ids(self) -> list[int]:
        return [token for token, on in zip(self.ids, self.loss_mask, strict=True) if on and token != EOS]


def encode(sample: Sample, vocab: Vocabulary, max_len: int | None = None) -> EncodedSample:
    """Encode one pair; over-long pairs lose input tokens first, then target tokens."""
    source = vocab.token_ids(sample.input)
    target = vocab.token_ids(sample.target)
    if max_len is not None:
        if max_len < 4:
            raise UsageError(f"max_len {max_len} cannot hold a one-token pair", error_code="MAX_LEN_TOO_SMALL")
        overflow = 3 + len(source) + len(target) - max_len
        if overflow > 0:
            cut = min(overflow, len(source))
            source = source[: len(source) - cut]
            target = target[: max_len - 3 - len(source)]
            logger.debug("truncated sample %s to %d tokens", sample.id, max_len)
    ids = [BOS, *source, SEP, *target, EOS]
    prompt_length = len(source) + 2
    loss_mask = [False] * prompt_length + [True] * (len(target) + 1)
    return EncodedSample(ids=ids, loss_mask=loss_mask, prompt_length=prompt_length)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens(ids))


def clm_labels(ids: Sequence[int], loss_mask: Sequence[bool] | None = None) -> list[int]:
    """Next-token labels: position ``t`` predicts ``ids[t + 1]``.

    Without a mask every next token is a label (full-sequence pretraining);
    with one, only masked positions are, the rest are ``IGNORE_INDEX``.
    """
    labels = []
    for t in range(len(ids)):
        nxt = t + 1
        if nxt >= len(ids) or (loss_mask is not None and not loss_mask[nxt]):
            labels.append(IGNORE_INDEX)
        else:
            labels.append(int(ids[nxt]))
    return labels
