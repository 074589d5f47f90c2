"""Named random sub-streams derived from one integer seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for ``name`` under ``seed``, independent of other names."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
