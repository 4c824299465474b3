"""Seeded random streams.

All initialization draws from ``numpy.random.Generator`` over the PCG64 bit
generator. Each purpose (a layer, an adapter, a data shuffle) gets its own
stream derived from the run seed and a stable label, so adding a new consumer
never shifts the numbers another consumer sees.
"""

import hashlib

import numpy as np

from peft_fusion.numcore.tensor import DTYPE


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def derive_rng(seed: int, *labels: str | int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, *(_label_key(str(label)) for label in labels)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def gaussian(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(DTYPE)
