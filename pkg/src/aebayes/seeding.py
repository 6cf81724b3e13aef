"""Deterministic seed derivation for every random stream in the pipeline.

All randomness flows from one 64-bit root seed.  Substreams are derived
through ``numpy.random.SeedSequence`` spawn keys, so results never depend
on execution order or parallel scheduling.  String key components (for
example a condition label) are hashed with SHA-256, which keeps the
derivation stable across processes and machines, unlike Python's
randomized ``hash``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_component(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed key components must be non-negative")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"unsupported seed key component: {part!r}")


def seed_sequence(root_seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(root_seed), spawn_key=tuple(_key_component(p) for p in key)
    )


def derive_seed(root_seed: int, *key) -> int:
    """A 64-bit seed for the substream identified by ``key``."""
    return int(seed_sequence(root_seed, *key).generate_state(1, np.uint64)[0])


def rng(root_seed: int, *key) -> np.random.Generator:
    """A fresh generator for the substream identified by ``key``."""
    return np.random.default_rng(seed_sequence(root_seed, *key))
