"""Deterministic, splittable random streams.

Every random draw in this package comes from a Philox counter-based
generator keyed through ``numpy.random.SeedSequence(seed, spawn_key=path)``,
so each stream is a pure function of the run seed plus a short integer
path and is reproducible across platforms.  Path prefixes below namespace
the consumers; the remaining path elements are usually a step or item
index.
"""

from __future__ import annotations

import numpy as np

# Stream purposes (first path element).
INIT = 1          # parameter initialization
TIMESTEPS = 2     # per-step diffusion timestep draws
NOISE = 3         # per-step training noise masks
BATCH = 4         # per-step batch index selection
AUGMENT = 5       # per-step augmentation draws
MASK = 6          # inpainting mask generation
CONDITION = 7     # random fill of masked condition bits
SAMPLER = 8       # reverse-process draws inside sample()
DATASET = 9       # synthetic dataset generation
EVAL = 10         # per-item seeds during evaluation


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for (seed, *path); same arguments, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def bernoulli(rng: np.random.Generator, p, shape) -> np.ndarray:
    """Draw iid {0,1} bits with P(1) = p; p may broadcast against shape."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("flip probability must lie in [0, 1]")
    return (rng.random(shape) < p).astype(np.uint8)
