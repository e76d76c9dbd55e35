"""Reproducible counter-based random streams.

Every stream is a Philox-4x64 generator keyed by a SeedSequence built from the
run seed plus a tuple path, so replicas and experiments draw from independent,
addressable streams regardless of scheduling order.
"""
from __future__ import annotations

import numpy as np

RNG_NAME = "numpy.random.Philox"
RNG_VERSION = f"numpy-{np.__version__}"


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def provenance(seed: int, *path: int) -> dict:
    return {"rng": RNG_NAME, "version": RNG_VERSION, "seed": int(seed), "path": [int(p) for p in path]}
