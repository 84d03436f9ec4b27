"""Seeded random streams.

All randomness in the package flows through numpy's PCG64 bit generator.
A single run seed is expanded into independent named streams (one per
purpose: ``"init"``, ``"dropout"``, ``"shuffle"``, ``"synth/..."``, ...)
by keying ``numpy.random.SeedSequence`` with a SHA-256 hash of the
purpose string.  Adding a new consumer therefore never perturbs existing
streams, and the same ``(seed, purpose)`` pair always yields the same
byte-for-byte draw sequence on every platform numpy supports.
"""

import hashlib

import numpy as np


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Return the PCG64 generator for ``(seed, purpose)``.

    The stream is a pure function of its arguments; callers that need
    several independent draws from one purpose should hold on to the
    returned generator instead of re-deriving it.
    """
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(seq))
