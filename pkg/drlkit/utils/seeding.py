"""Named random sub-streams derived from one root seed.

All stochastic components (init, attack, transform, shuffle, data, threat)
draw from their own generator so any of them can be reseeded without
disturbing the others.
"""

import hashlib

import numpy as np

STREAMS = ("init", "attack", "transform", "shuffle", "data", "threat")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return the generator for ``name`` under ``root_seed``.

    The same (seed, name) pair always yields the same sequence.
    """
    if root_seed < 0:
        raise ValueError(f"seed must be non-negative, got {root_seed}")
    seq = np.random.SeedSequence(entropy=root_seed, spawn_key=(_name_key(name),))
    return np.random.default_rng(seq)


def derive_seed(root_seed: int, name: str) -> int:
    """Integer seed for components that take a plain seed (e.g. AttackConfig)."""
    return int(substream(root_seed, name).integers(0, 2**31 - 1))
