"""Keyed derivation of random streams from a single master seed.

Every random consumer (initialization, shuffling, negative sampling, ...)
gets its own stream derived from (master_seed, label). Adding a new
consumer never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEED_BOUND = 2**63


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_seed_sequence(master_seed: int, label: str) -> np.random.SeedSequence:
    """SeedSequence for the stream named `label` under `master_seed`."""
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    return np.random.SeedSequence([master_seed, _label_key(label)])


def derived_rng(master_seed: int, label: str) -> np.random.Generator:
    """Generator for the stream named `label` under `master_seed`."""
    return np.random.default_rng(derived_seed_sequence(master_seed, label))


def derived_int_seed(master_seed: int, label: str) -> int:
    """A plain integer seed derived from (master_seed, label).

    Used where a consumer (e.g. one sweep cell) needs its own master seed.
    """
    state = derived_seed_sequence(master_seed, label).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32 | int(state[1])) % _SEED_BOUND
