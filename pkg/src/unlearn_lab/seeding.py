"""Named random streams.

Each consumer asks for a stream by name ("init", "shuffle", "shadow-2", ...).
Streams are derived from the root seed and a CRC of the name, so adding a new
consumer never perturbs the numbers another consumer sees.
"""

import zlib

import numpy as np


def stream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))
