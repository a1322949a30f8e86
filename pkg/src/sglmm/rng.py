"""Seed management: one master seed, named independent substreams.

Every stochastic component draws from its own substream so that runs are
bit-reproducible regardless of execution order or worker count.  Substreams
are derived from ``(master_seed, crc32(name), index)`` through
``numpy.random.SeedSequence``, so the mapping is stable across platforms
and numpy versions.

Substream names used by the package:

===========  ====================================================
``simulation``  dataset generation (coordinates, random effects, responses)
``chain``       Metropolis-Hastings chains (index = outer iteration)
``sketch``      Gaussian sketching matrices for randomized eigendecomposition
``bootstrap``   parametric bootstrap replicates (index = replicate id)
``study``       replicated simulation studies (index = replicate id)
===========  ====================================================
"""

from __future__ import annotations

import zlib

import numpy as np

_KNOWN_STREAMS = ("simulation", "chain", "sketch", "bootstrap", "study")


def substream_seed(master_seed: int, name: str, index: int = 0) -> np.random.SeedSequence:
    """Derive the seed sequence for one named substream."""
    if master_seed < 0:
        raise ValueError("master seed must be nonnegative")
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.SeedSequence(entropy=[int(master_seed), int(tag), int(index)])


def substream(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for substream ``(name, index)`` of ``master_seed``."""
    return np.random.default_rng(substream_seed(master_seed, name, index))
