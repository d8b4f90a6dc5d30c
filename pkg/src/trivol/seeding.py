"""Deterministic seed derivation.

Every source of randomness in a run is a generator derived from the master seed
plus a tuple of string/int names (stage, purpose, iteration, ...). Streams are
therefore independent of each other and of optional components: adding or
removing a consumer never shifts anyone else's stream, and any iteration can be
re-derived in isolation (which is what makes mid-stage resume exact).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *names: object) -> int:
    """Stable 63-bit seed from a master seed and a name path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def spawn_rng(master: int, *names: object) -> np.random.Generator:
    """Independent numpy generator for the given name path."""
    return np.random.default_rng(derive_seed(master, *names))
