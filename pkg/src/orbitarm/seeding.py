"""Named random substreams derived from one master seed.

Every consumer asks for ``stream(seed, "purpose", ids...)``; no code touches a
global generator, so results depend only on the seed and the ids.
"""

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name, *ids):
    entropy = [int(seed), _name_key(name)] + [int(i) for i in ids]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def episode_streams(seed, name, first_episode, count, worker=0):
    return [stream(seed, name, worker, first_episode + i) for i in range(count)]
