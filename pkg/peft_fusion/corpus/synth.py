from __future__ import annotations

import logging
from pathlib import Path

from peft_fusion.config import SynthConfig
from peft_fusion.corpus.records import Sample, save_corpus
from peft_fusion.numcore import derive_rng
from peft_fusion.serializers import BaseSerializer

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


def language_pool(language: str, pool_size: int, overlap: float) -> list[str]:
    """Surface tokens of one language: ``round(overlap * P)`` shared words, the rest private."""
    shared = int(round(overlap * pool_size))
    return [f"w{i}" for i in range(shared)] + [f"{language}_w{i}" for i in range(shared, pool_size)]


def synth_samples(config: SynthConfig, seed: int) -> dict[str, list[Sample]]:
    """Toy pairs per split: the input is a random pool phrase, the target is its reversal."""
    splits: dict[str, list[Sample]] = {name: [] for name in SPLITS}
    for language in sorted(config.languages):
        pool = language_pool(language, config.pool_size, config.overlap)
        sizes = {
            "train": config.languages[language],
            "valid": config.valid_size,
            "test": config.test_size,
        }
        for split in SPLITS:
            rng = derive_rng(seed, "synth", language, split)
            for index in range(sizes[split]):
                length = int(rng.integers(config.min_len, config.max_len + 1))
                words = [pool[int(i)] for i in rng.integers(0, len(pool), size=length)]
                splits[split].append(
                    Sample(
                        id=f"{language}-{split}-{index:05d}",
                        language=language,
                        input=" ".join(words),
                        target=" ".join(reversed(words)),
                    )
                )
    return splits


def synth_corpus(
    config: SynthConfig,
    seed: int,
    out_dir: Path,
    serializer: BaseSerializer | None = None,
) -> dict[str, Path]:
    """Write ``train.jsonl``, ``valid.jsonl`` and ``test.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    paths = {}
    for split, samples in synth_samples(config, seed).items():
        path = out_dir / f"{split}.jsonl"
        save_corpus(path, samples, serializer)
        paths[split] = path
        logger.info("wrote %d %s samples to %s", len(samples), split, path)
    return paths
