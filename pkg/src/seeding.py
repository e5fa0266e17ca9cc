"""Splittable seeding.

One master seed fans out to independent generators through
``numpy.random.SeedSequence(entropy=master, spawn_key=(domain, stage, ...))``.
Each consumer owns a fixed domain id, so toggling a method flag (which only
changes which consumers run) never shifts the random stream another consumer
sees. Domain ids are part of the on-disk reproducibility contract; do not
renumber them.
"""

from enum import IntEnum

import numpy as np


class SeedDomain(IntEnum):
    STREAM_DIRECTIONS = 1
    STREAM_SAMPLES = 2
    PRETRAIN_DATA = 3
    MODEL_INIT = 4
    CLASS_TOKENS = 5
    PRETRAIN_BATCHES = 6
    TRAIN_BATCHES = 7
    ANCHOR_BATCHES = 8


def generator(master_seed: int, domain: SeedDomain, *counters: int) -> np.random.Generator:
    """Return the generator for ``(domain, *counters)`` under ``master_seed``."""
    spawn_key = (int(domain),) + tuple(int(c) for c in counters)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master_seed), spawn_key=spawn_key))
