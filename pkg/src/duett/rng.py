"""Named, seedable random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, seeded
from ``SeedSequence([seed, crc32(purpose), *extra])``.  Separate purposes
(``"init"``, ``"dropout"``, ``"mask"``, ...) never share draws, so turning
one mechanism off leaves the others' random sequences untouched.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64"


def make_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed), tag, *[int(e) for e in extra]])
    return np.random.Generator(np.random.PCG64(ss))
