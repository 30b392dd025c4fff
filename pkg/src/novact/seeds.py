"""Deterministic substream derivation.

Every random decision in the pipeline draws from a generator keyed by
(seed, stream tag, *context ints). Keys go through numpy's SeedSequence,
so independently-keyed consumers get statistically independent streams and
parallel execution cannot change any outcome.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes every
# derived stream in existing artifacts.
AUGMENT = 1
SYNTH = 2
SPLIT = 3
INIT = 4
SHUFFLE = 5
VIEWS = 6
POSITIVE = 7
CST = 8
TRAIN = 9
SCORE = 10
TRIAL = 11
DISC_SHUFFLE = 12
EPOCH = 13


def substream(*key: int) -> np.random.Generator:
    """Return a fresh generator positioned by the given key tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def mix(*key: int) -> int:
    """Collapse a key tuple into a single non-negative integer seed."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])
