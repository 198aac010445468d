"""Single source of randomness for the whole package.

Every stochastic routine draws from a Philox 4x64 counter-based generator
(numpy's implementation).  Independent substreams are derived from one
master seed through ``numpy.random.SeedSequence`` spawn keys, so any
analysis is reproducible from a single 64-bit seed and results do not
depend on execution order or worker count: a replicate's stream is
identified by its index, not by when it happens to run.
"""

import numpy as np

from .errors import ValidationError

__all__ = ["substream"]


def substream(seed, *path):
    """Return the Philox generator for the substream identified by ``path``.

    Parameters
    ----------
    seed : int
        Master seed, a non-negative integer (64-bit range).
    *path : int
        Substream coordinates, e.g. ``(scenario_id, grid_index, replicate)``.
        The empty path is the master stream itself.
    """
    seed = int(seed)
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")
    key = []
    for p in path:
        p = int(p)
        if p < 0:
            raise ValidationError(f"substream path entries must be non-negative, got {p}")
        key.append(p)
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))
