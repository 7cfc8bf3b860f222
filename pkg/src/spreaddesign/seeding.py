"""Named random substreams derived from a single master seed.

Every source of randomness in a run (chains, imputation, replicates,
design evaluations) draws from a substream addressed by a readable path,
e.g. ``substream(seed, "chain", 0)``. Paths hash to SeedSequence spawn
keys, so streams are independent, reproducible across platforms, and
insensitive to the order in which they are created.
"""

import hashlib

import numpy as np


def _key_words(part) -> tuple[int, int]:
    if isinstance(part, (bool, float)):
        raise TypeError(f"substream path parts must be str or int, got {part!r}")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("integer path parts must be nonnegative")
        return (int(part) & 0xFFFFFFFF, (int(part) >> 32) & 0xFFFFFFFF)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return (
        int.from_bytes(digest[0:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


def substream(master_seed: int, *path) -> np.random.Generator:
    """Return a Generator for the stream named by ``path`` under ``master_seed``."""
    key: tuple[int, ...] = ()
    for part in path:
        key = key + _key_words(part)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.default_rng(seq)


def derive_seed(master_seed: int, *path) -> int:
    """Collapse a named substream into a plain integer seed."""
    return int(substream(master_seed, *path).integers(0, 2**63 - 1))
