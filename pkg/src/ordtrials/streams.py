"""Reproducible random streams for parallel Monte Carlo.

Every simulated trial gets its own counter-based (Philox) stream derived from
(master seed, scenario id, replicate index).  Derivation goes through SHA-256
of the scenario id, so streams for distinct (scenario, replicate) pairs are
distinct and independent of execution order or worker count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _id_words(scenario_id: str) -> list[int]:
    digest = hashlib.sha256(scenario_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]


@dataclass(frozen=True)
class SeedPolicy:
    """Derives per-replicate generators from one 64-bit master seed."""

    master_seed: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in 64 bits")

    def sequence(self, scenario_id: str, replicate: int) -> np.random.SeedSequence:
        if replicate < 0:
            raise ValueError("replicate index must be nonnegative")
        return np.random.SeedSequence(
            [self.master_seed, *_id_words(scenario_id), replicate]
        )

    def stream(self, scenario_id: str, replicate: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.sequence(scenario_id, replicate)))
