"""Deterministic RNG stream derivation.

Every random stream in the pipeline is keyed by the run seed plus a tuple of
stable string/int keys, so results do not depend on call order or scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _key_words(keys) -> list[int]:
    words = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(key).encode("utf-8")))
    return words


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key_words(keys)])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Numpy generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0] >> 1)


def derive_torch_generator(seed: int, *keys) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *keys))
    return gen
