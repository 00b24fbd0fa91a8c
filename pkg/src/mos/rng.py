"""Keyed random streams.

Every random draw in the pipeline comes from a stream addressed by a master
seed plus a derivation path such as ``(epoch, kind, sample, slot)``. Streams
never depend on call order or thread identity, so results are reproducible for
any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# first path element after the epoch, keeps namespaces apart
KIND_SAMPLE = 0
KIND_BATCH = 1
KIND_SHUFFLE = 2


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.master_seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed & 0xFFFFFFFFFFFFFFFF,
                                     spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))
