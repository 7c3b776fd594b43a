"""Counter-based random streams keyed by labels.

Every random draw in the package comes from a stream named by a tuple of
labels, e.g. ``("network", 0, k, l)``, so results do not depend on the
order in which blocks or replications are executed.
"""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be nonnegative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


class RngStreams:
    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be nonnegative, got {seed}")
        self.seed = seed

    def seed_sequence(self, *labels):
        return np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(label) for label in labels))

    def stream(self, *labels):
        return np.random.Generator(np.random.Philox(self.seed_sequence(*labels)))

    def __repr__(self):
        return f"RngStreams(seed={self.seed})"
