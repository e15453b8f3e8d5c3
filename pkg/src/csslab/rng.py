"""Deterministic random-stream derivation.

Every source of randomness in the package is a child stream of one 64-bit
run seed, derived through ``numpy.random.SeedSequence`` with a string key.
The key fixes the purpose ("means", "image", "shuffle", ...) plus any integer
coordinates (image index, step, epoch), so adding or removing one consumer
never shifts the draws seen by another. Identical (seed, key) always yields
an identical stream.

Draw-order contracts are documented at the call sites; this module only
owns the seed -> stream mapping.
"""

from __future__ import annotations

import numpy as np

# string keys are folded into the spawn key as stable uint32 sequences
def _key_words(parts: tuple) -> list[int]:
    words: list[int] = []
    for part in parts:
        if isinstance(part, str):
            for ch in part.encode("utf-8"):
                words.append(ch)
            words.append(0xFFFF_FFFF)  # terminator keeps ("a",1) != ("a1",)
        elif isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"stream key integers must be >= 0, got {part}")
            lo = int(part) & 0xFFFF_FFFF
            hi = (int(part) >> 32) & 0xFFFF_FFFF
            words.extend([lo, hi])
        else:
            raise TypeError(f"unsupported stream key part: {part!r}")
    return words


class RngStream:
    """One run seed plus named, independent child generators."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def child(self, *key) -> np.random.Generator:
        """Fresh generator for (seed, key); same key -> same stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_words(key)))
        return np.random.Generator(np.random.PCG64(seq))
