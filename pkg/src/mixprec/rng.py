"""Counter-based random streams keyed by ``(seed, purpose, index)``.

Every consumer derives its own Philox stream from the key, so results do not
depend on how work is split across workers or in which order it runs.
"""

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    key = [seed & _MASK32, seed >> 32, zlib.crc32(purpose.encode("utf-8")), int(index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def rademacher(seed: int, purpose: str, index: int, shape, dtype=np.float32) -> np.ndarray:
    bits = stream(seed, purpose, index).integers(0, 2, size=shape, dtype=np.int8)
    return (2 * bits - 1).astype(dtype)
