"""Counter-based random streams.

Each path owns a Philox stream whose 128-bit key is (seed, mix(stream ids)).
Within a stream the k-th step consumes the k-th block of n normals, so the
increment of step k on path i depends only on (seed, ids, k). Nothing depends
on batch layout or on how work is split across processes.
"""

from functools import lru_cache

import numpy as np

MASK64 = (1 << 64) - 1

# stream tags keep the different kinds of paths apart
MAIN = 1
INNER = 2
PANEL = 3


def _splitmix(z):
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@lru_cache(maxsize=65536)
def _mix(ids):
    if not ids:
        return 0x243F6A8885A308D3
    return _splitmix(_mix(ids[:-1]) ^ (int(ids[-1]) & MASK64))


def stream_key(seed, *ids):
    """128-bit Philox key for the stream labelled by ``ids`` under ``seed``."""
    return np.array([int(seed) & MASK64, _mix(tuple(int(i) for i in ids))], dtype=np.uint64)


def generator(seed, *ids):
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *ids)))


def increments(seed, ids, steps, n, dtau):
    """Brownian increments N(0, 2 dtau I) for a list of streams.

    ``ids`` is a sequence of id tuples, one per path. Returns (len(ids), steps, n).
    The factor 2 matches the generator Delta (not Delta / 2).
    """
    out = np.empty((len(ids), steps, n))
    scale = np.sqrt(2.0 * dtau)
    # rekeying one bit generator is several times cheaper than building one per path
    bg = np.random.Philox(key=stream_key(seed))
    gen = np.random.Generator(bg)
    state = bg.state
    for j, key in enumerate(ids):
        state["state"]["key"] = stream_key(seed, *key)
        state["state"]["counter"] = np.zeros(4, dtype=np.uint64)
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        bg.state = state
        out[j] = gen.standard_normal((steps, n))
    out *= scale
    return out
