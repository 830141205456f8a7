"""Counter-based random streams keyed by (seed, experiment, index).

Every batch of samples gets its own Philox stream, so serial and batched
runs draw identical numbers regardless of how work is split.
"""
import zlib

import numpy as np


def experiment_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, experiment: str = "", index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, experiment_key(experiment), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def batches(total: int, batch_size: int):
    """Yield (batch_index, size) pairs covering `total` samples."""
    i = 0
    done = 0
    while done < total:
        n = min(batch_size, total - done)
        yield i, n
        done += n
        i += 1
