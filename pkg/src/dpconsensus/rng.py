"""Named, counter-based random substreams.

All randomness in a run derives from one 64-bit seed. A stream is addressed
by a purpose name plus up to three integer coordinates (agent, round, ...).
The seed and purpose form the Philox key; the coordinates occupy the upper
three 64-bit words of the Philox counter and draws advance the lowest word,
so distinct addresses never share a block. The draws an agent makes in a
round therefore do not depend on how many draws anyone else made.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

# purpose names used by the simulator
GRAPH = "graph"
PARTITION = "partition"
INIT = "init"
NOISE = "noise"
SAMPLING = "sampling"
DATA = "data"

_MASK64 = 0xFFFFFFFFFFFFFFFF


@lru_cache(maxsize=1024)
def _key(seed: int, purpose: str) -> tuple[int, int]:
    digest = hashlib.sha256(f"{seed & _MASK64}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little")


def substream(seed: int, purpose: str, *coords: int) -> np.random.Generator:
    """Returns the generator for ``(seed, purpose, *coords)``.

    Identical addresses always replay identical draws.
    """
    if len(coords) > 3:
        raise ValueError("at most three stream coordinates are supported")
    if any(c < 0 for c in coords):
        raise ValueError("stream coordinates must be non-negative")
    counter = [0, 0, 0, 0]
    for slot, c in enumerate(coords, start=1):
        counter[slot] = int(c) & _MASK64
    # coordinate count in the top bits keeps (a,) and (a, 0) apart
    counter[3] |= len(coords) << 60
    return np.random.Generator(np.random.Philox(counter=counter, key=_key(int(seed), purpose)))


def derive_seed(seed: int, purpose: str, *coords: int) -> int:
    """A 63-bit child seed, for components that take plain integer seeds."""
    return int(substream(seed, purpose, *coords).integers(0, 2**63 - 1))
