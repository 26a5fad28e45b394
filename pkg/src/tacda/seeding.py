"""Named random streams derived from one global seed.

Every consumer asks for its own stream by name, so adding or removing a
stage never shifts the random numbers another stage sees.
"""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def sub_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(stream_key(name),))


def sub_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed(seed, name)))
