"""Deterministic seed derivation for named random substreams.

Every random draw in the package flows through a generator obtained from
``substream(master_seed, label)``. Labels are stable strings such as
``"prune/fc1.weight"``, so results never depend on iteration order and a
single master seed reproduces an entire pipeline bit-for-bit within one
build.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, label: str) -> int:
    """Hash (master_seed, label) into an unsigned 64-bit integer seed."""
    payload = f"{master_seed}\x1f{label}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, label: str) -> np.random.Generator:
    """Return an independent generator for the given (seed, label) pair."""
    return np.random.default_rng(derive_seed(master_seed, label))
