"""Counter-based random number streams.

Every source of randomness in a simulation run is a Philox stream keyed by
the master seed plus a structured spawn key (purpose tag, round, client id).
Streams are therefore independent of scheduling: the same (seed, key) pair
always yields the same draws no matter in which order, or on which worker,
they are consumed.
"""

from __future__ import annotations

import numpy as np

# Purpose tags for spawn keys.  Keep values stable: they are part of what
# makes a run reproducible from its manifest.
INIT = 0
SAMPLE = 1
BATCH = 2
NOISE = 3
MASK = 4
DATA = 5
PARTITION = 6
SWAP = 7
PROBE = 8


def derive_seed(master_seed: int, *key: int) -> int:
    """Derive a 64-bit child seed from a master seed and a spawn key."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))
    hi, lo = ss.generate_state(2)
    return (int(hi) << 32) | int(lo)


def philox(seed: int) -> np.random.Generator:
    """A Generator over the counter-based Philox engine for a given seed."""
    return np.random.Generator(np.random.Philox(key=seed))


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Philox stream for (master seed, spawn key)."""
    return philox(derive_seed(master_seed, *key))
