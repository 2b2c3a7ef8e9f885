"""Deterministic random streams derived from a single named seed."""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Seed keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """SeedSequence for the stream addressed by ``keys`` under ``seed``."""
    return np.random.SeedSequence([_key_to_int(seed), *(_key_to_int(k) for k in keys)])


def rng_for(seed: int, *keys: Key) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same arguments, same stream."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: Key) -> int:
    """A 32-bit integer seed for the stream ``(seed, *keys)``."""
    return int(seed_sequence(seed, *keys).generate_state(1)[0])
