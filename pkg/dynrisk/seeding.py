"""
Stable seed derivation.

Every random stream in the package comes from one master seed. A child seed is the
first 8 bytes (big-endian) of SHA-256 over "master:key1:key2:...", masked to 63 bits,
so it does not depend on scheduling, thread count or Python's hash randomisation.
"""

import hashlib

import numpy as np

_MASK_63 = (1 << 63) - 1


def derive_seed(master_seed: int, *keys) -> int:
    """
    Derive a child seed from a master seed and any number of keys.

    Args:
        master_seed: The run's master seed
        *keys: Stream labels and indices, e.g. ("tree", 17)

    Returns:
        Non-negative 63-bit integer seed
    """
    text = ":".join(str(part) for part in (int(master_seed),) + keys)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _MASK_63


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Numpy generator seeded with derive_seed(master_seed, *keys)."""
    return np.random.default_rng(derive_seed(master_seed, *keys))
