"""Counter-based random sub-streams.

Every random draw in the package comes from a Philox generator keyed by
``(master seed, stream code, mark, block)``. Paths are grouped in fixed-size
blocks, so the numbers a path receives depend only on its index and never on
how many paths were requested alongside it or on the order of consumption.
"""

import numpy as np

BLOCK = 1024

STREAMS = {
    "intensity": 1,
    "gauss": 2,
    "poisson": 3,
    "direction": 4,
    "probe": 5,
}


def substream(seed: int, name: str, mark: int = 0, block: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], int(mark), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n_paths: int):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        yield b, start, min(start + BLOCK, n_paths)
