"""Counter-based random streams.

Every random draw in the package comes from a Philox substream keyed by
(seed, purpose, index). Philox is counter-based, so substreams never
overlap, results do not depend on scheduling order, and any individual
stream (say, the u-draw of trial 137) can be regenerated in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _purpose_words(purpose: str) -> tuple[int, int]:
    digest = hashlib.blake2s(purpose.encode("utf-8"), digest_size=8).digest()
    return (
        int.from_bytes(digest[:4], "little"),
        int.from_bytes(digest[4:], "little"),
    )


def substream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return a Generator for the (seed, purpose, index) substream.

    The same triple always yields the same stream; distinct triples yield
    statistically independent streams.
    """
    w0, w1 = _purpose_words(purpose)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(w0, w1, int(index)))
    return np.random.Generator(np.random.Philox(ss))
