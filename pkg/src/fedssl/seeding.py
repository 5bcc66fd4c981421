"""Key-derived random streams.

One experiment seed fans out into independent named streams (dataset, init,
selection, augmentation, per-client training, ...) so changing one component
of a run never perturbs the draws of another.  Keys are hashed into the
entropy pool of a ``SeedSequence``, which keeps derivation stable across
platforms and numpy versions.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be nonnegative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys) -> int:
    """A derived 63-bit integer seed for components that take plain ints."""
    material = [int(seed)] + [_key_int(k) for k in keys]
    blob = b"".join(k.to_bytes(16, "little") for k in material)
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """A generator for the stream identified by ``keys`` under ``seed``."""
    seq = np.random.SeedSequence([int(seed)] + [_key_int(k) for k in keys])
    return np.random.default_rng(seq)
