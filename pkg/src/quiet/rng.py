"""Splittable, counter-based random number generation.

Every random decision in a run is drawn from a Philox generator derived
from the single run seed plus a tuple of string/int tags, so independent
subsystems never share or race a stream.
"""

import hashlib

import numpy as np


def _tag_word(tag) -> int:
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive(seed: int, *tags) -> np.random.Generator:
    """Return a generator keyed by (seed, *tags); same inputs, same stream."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
