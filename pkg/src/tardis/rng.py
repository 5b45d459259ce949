"""Counter-based random streams addressed by (seed, name).

Philox is keyed with (seed, sha256(name)), so every sampling site owns an
independent stream: adding a draw site never perturbs any other site, and a
run is reproducible from the root seed alone.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    sub = int.from_bytes(digest[:8], "little")
    return np.array([seed & _MASK64, sub], dtype=np.uint64)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the sampling site `name` under `seed`."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))
