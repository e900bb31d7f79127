"""Named, seeded random substreams.

All randomness in the pipeline flows from one master seed through named
substreams (e.g. "datagen", "init", "shuffle", "reparameterize"), so any
stage can be re-derived independently and runs are bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the substream ``name`` (optionally sub-indexed) of ``seed``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
