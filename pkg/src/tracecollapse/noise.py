"""Reproducible per-stream random numbers.

Stream derivation: a master seed and a stream index are fed to
``numpy.random.SeedSequence(master_seed, spawn_key=(domain, index))``, whose
output keys a Philox-4x64 counter-based generator. Streams are therefore a
pure function of ``(master_seed, domain, index)`` and never depend on how work
is scheduled across threads.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep sampler chains and collapse trajectories on disjoint keys.
DOMAIN_CHAIN = 1
DOMAIN_TRAJECTORY = 2
DOMAIN_INIT = 3

SEED_MASK = (1 << 64) - 1


def stream_generator(master_seed: int, index: int, domain: int = DOMAIN_TRAJECTORY) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed) & SEED_MASK, spawn_key=(int(domain), int(index)))
    return np.random.Generator(np.random.Philox(ss))


class NoiseStream:
    """Wiener increments for one trajectory.

    ``counter`` counts normals drawn so far; ``skip_to`` jumps ahead
    without generating, so any block of a stream can be reproduced alone.
    """

    def __init__(self, master_seed: int, index: int, domain: int = DOMAIN_TRAJECTORY):
        self.master_seed = int(master_seed)
        self.index = int(index)
        self.domain = int(domain)
        self.counter = 0
        self._gen = stream_generator(master_seed, index, domain)

    def normals(self, n: int) -> np.ndarray:
        out = self._gen.standard_normal(n)
        self.counter += n
        return out

    def increments(self, n: int, dt: float) -> np.ndarray:
        """``n`` i.i.d. N(0, dt) increments."""
        return np.sqrt(dt) * self.normals(n)

    def skip_to(self, counter: int) -> None:
        if counter < self.counter:
            self._gen = stream_generator(self.master_seed, self.index, self.domain)
            self.counter = 0
        # standard_normal consumes a variable number of raw draws, so replay.
        while self.counter < counter:
            self.normals(min(65536, counter - self.counter))


def increment_block(streams: list[NoiseStream], n_steps: int, dt: float) -> np.ndarray:
    """Stack the next ``n_steps`` increments of each stream, shape ``(n_steps, n_streams)``."""
    return np.stack([s.increments(n_steps, dt) for s in streams], axis=1)
