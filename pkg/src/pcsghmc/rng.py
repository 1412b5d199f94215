"""Deterministic counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by the
run seed plus a structural address (chain index, step index, purpose tag).
Streams are therefore independent of execution order and of chain-level
parallelism, and resuming a run at an arbitrary point reproduces the exact
draws of a monolithic run.
"""

from __future__ import annotations

import numpy as np

# Purpose tags -> small ints so spawn keys stay purely numeric.
_PURPOSES = {
    "noise": 1,
    "init": 2,
    "momentum": 3,
    "replay": 4,
    "select": 5,
    "data": 6,
    "weights": 7,
    "subsample": 8,
    "hmc": 9,
    "hmc-pilot": 10,
}


def stream(seed: int, purpose: str, *address: int) -> np.random.Generator:
    """Return the Philox stream for (seed, purpose, address...).

    The same arguments always yield a generator producing identical draws.
    """
    tag = _PURPOSES[purpose]
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 63) - 1),
                                spawn_key=(tag, *map(int, address)))
    return np.random.Generator(np.random.Philox(ss))
