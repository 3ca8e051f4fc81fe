"""Named, counter-addressable random substreams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(part: str | int) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"substream counters must be nonnegative, got {part}")
    return int(part)


def seed_sequence(seed: int, *path: str | int) -> np.random.SeedSequence:
    """SeedSequence for the substream addressed by ``path`` under ``seed``.

    The same (seed, path) always yields the same stream regardless of how many
    other streams were drawn before it, which keeps parallel and serial
    generation identical.
    """
    return np.random.SeedSequence(seed & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(_key(p) for p in path))


def numpy_rng(seed: int, *path: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))


def torch_generator(seed: int, *path: str | int) -> torch.Generator:
    state = seed_sequence(seed, *path).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
    return g
