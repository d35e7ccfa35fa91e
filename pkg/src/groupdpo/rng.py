"""Seeded, splittable random streams.

All randomness in the package comes from :func:`stream`.  A stream is a numpy
``Generator`` over PCG64 whose seed is derived by ``SeedSequence`` from the run
seed plus a purpose tag and integer keys, e.g. ``stream(seed, "pair", step,
group_id)``.  Streams with different keys are statistically independent, and
a given key always yields the same draws regardless of what other streams were
consumed before it, so parallel and serial generation agree.
"""

import zlib

import numpy as np

GENERATOR_NAME = "PCG64/SeedSequence"


def _tag(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, *keys):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(purpose)]
    entropy += [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
