"""Deterministic derivation of named random streams.

Every stochastic component draws from its own stream derived from
(master seed, purpose tags), so adding or removing one component never
shifts the draws of another. All derivations go through
``numpy.random.SeedSequence`` with crc32-hashed string tags, which is
stable across platforms and processes.
"""

import zlib

import numpy as np


def _encode_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def seed_sequence(master: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF] + [_encode_tag(t) for t in tags])


def rng_for(master: int, *tags) -> np.random.Generator:
    """Generator for the stream named by ``tags`` under ``master``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *tags)))
