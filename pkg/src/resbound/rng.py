"""Keyed counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from a tuple of integers (base seed, stage, slice, ...).  Streams are
never shared between independent units of work, so results do not depend on
the order in which cases, seeds, or slices are processed.
"""

import hashlib

import numpy as np

RNG_ALGORITHM = "numpy.random.Philox(4x64-10) keyed by SeedSequence"

_MASK64 = (1 << 64) - 1


def _key_words(keys):
    words = []
    for k in keys:
        if isinstance(k, str):
            k = int.from_bytes(hashlib.sha256(k.encode("utf-8")).digest()[:8], "little")
        k = int(k) & _MASK64
        # SeedSequence takes 32-bit words; split so the full 64 bits matter
        words.extend((k & 0xFFFFFFFF, k >> 32))
    return words


def stream(*keys):
    """Return a fresh Generator keyed by ``keys`` (ints or strings)."""
    ss = np.random.SeedSequence(_key_words(keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(*keys):
    """Collapse ``keys`` into one 64-bit seed (stable across runs and platforms)."""
    ss = np.random.SeedSequence(_key_words(keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
