"""Counter-based random streams keyed by (master seed, tags).

A stream is a pure function of its key: Philox seeded through a SeedSequence
whose spawn key is derived from the tag tuple.  Replicas never share state,
so results do not depend on scheduling order or worker count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _tag_words(tags: tuple) -> tuple:
    words = []
    for t in tags:
        digest = hashlib.sha256(repr(t).encode()).digest()
        words.append(int.from_bytes(digest[:4], "little"))
        words.append(int.from_bytes(digest[4:8], "little"))
    return tuple(words)


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    tags: tuple = ()

    def child(self, *tags) -> "RngStream":
        return RngStream(self.master_seed, self.tags + tuple(tags))

    def generator(self) -> np.random.Generator:
        """A fresh generator; equal keys give equal draws."""
        ss = np.random.SeedSequence(entropy=int(self.master_seed),
                                    spawn_key=_tag_words(self.tags))
        return np.random.Generator(np.random.Philox(ss))

    def to_json(self) -> dict:
        return {"master_seed": int(self.master_seed), "tags": [repr(t) for t in self.tags]}


def split_stream(master, *tags) -> RngStream:
    """Derive the stream for ``tags`` from a master seed or a parent stream."""
    if isinstance(master, RngStream):
        return master.child(*tags)
    return RngStream(int(master), tuple(tags))
