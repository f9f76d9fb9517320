"""Portable, seeded random-number streams.

All stochastic parts of the library draw from Philox4x64-10, a counter-based
generator whose output is bit-stable across platforms and numpy releases of
the same major line.  Independent streams are derived from a master seed and
one or more integer stream ids via ``SeedSequence([master_seed, *ids])``, so
(master_seed, ids) fully determines every draw.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64-10/seedseq-v1"


def stream(master_seed: int, *stream_ids: int) -> np.random.Generator:
    """Return the Philox stream identified by (master_seed, stream_ids)."""
    seq = np.random.SeedSequence([int(master_seed), *[int(s) for s in stream_ids]])
    return np.random.Generator(np.random.Philox(seq))
