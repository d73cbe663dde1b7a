"""Seed plumbing.

Every random draw in the package flows from a single root seed through a
named sub-stream, so reruns with the same seed are bit-identical no matter
which features are enabled.
"""

import numpy as np

_STREAM_KEYS = {
    "init": 1,
    "shuffle": 2,
    "clip": 3,
    "synthetic": 4,
}


def rng_stream(seed, name, *extra):
    """Generator for the named sub-stream; extra ints select children."""
    key = (_STREAM_KEYS[name],) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
