"""
Per-sample random streams.

Every random draw in the pipeline comes from a generator keyed by
(seed, sample index, role), so results do not depend on which worker
processes a sample or in what order.
"""
import zlib

import numpy as np


def role_id(role: str) -> int:
    """Stable integer for a role name."""
    return zlib.crc32(role.encode("utf-8"))


def derive_rng(seed: int, index: int, role: str) -> np.random.Generator:
    """Return an independent generator for (seed, index, role)."""
    if seed < 0 or index < 0:
        raise ValueError(f"seed and index must be non-negative, got {seed}, {index}")
    return np.random.default_rng([int(seed), int(index), role_id(role)])
