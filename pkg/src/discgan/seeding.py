"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; names may be str or int."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
