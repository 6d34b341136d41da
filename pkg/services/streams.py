# services/streams.py

import numpy as np


def derive_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, *keys); order of creation does not matter."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])
