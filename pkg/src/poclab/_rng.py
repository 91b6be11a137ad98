import zlib

import numpy as np


def _tag(t):
    if isinstance(t, (int, np.integer)):
        return int(t)
    return zlib.crc32(str(t).encode())


def make_rng(seed, *tags):
    """Counter-based Philox stream keyed by (seed, tags).

    Streams with different tags are independent, and a stream is a pure
    function of its key, so shards can be generated in any order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_tag(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))
