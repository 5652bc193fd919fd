"""Seeded random streams.

Every consumer of randomness draws from its own Philox (counter-based)
generator keyed by ``SeedSequence(seed, spawn_key=(role, *index))``.  A
stream therefore depends only on the run seed, its role and its index (unit
number, epoch, batch), never on the order in which other streams are used.
"""

import enum

import numpy as np


class Role(enum.IntEnum):
    WEIGHT_MASK = 0
    ACT_MASK = 1
    SHUFFLE = 2
    AUGMENT = 3
    INIT = 4
    PROBE = 5


def stream(seed: int, role: Role, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(role), *map(int, index)))
    return np.random.Generator(np.random.Philox(ss))
