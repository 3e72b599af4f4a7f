"""Counter-based random streams.

Every stochastic routine in the toolkit draws from ``substream(seed, k)``
for an explicit stream index ``k`` (sample block, training step, trajectory
chunk).  Streams are independent and reproducible regardless of how work is
partitioned across workers, so parallel fan-out with a fixed-order reduction
gives bit-identical results to a sequential run.
"""

from __future__ import annotations

import numpy as np

# Fixed block size for Monte Carlo chunking; part of the determinism contract.
CHUNK = 8192


def substream(seed: int, stream: int) -> np.random.Generator:
    """Generator for stream `stream` of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),)))


def chunk_sizes(n: int, chunk: int = CHUNK) -> list[int]:
    """Split n items into fixed-size blocks (last one ragged)."""
    if n <= 0:
        return []
    full, rem = divmod(n, chunk)
    return [chunk] * full + ([rem] if rem else [])
