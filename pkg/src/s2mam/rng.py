"""Seeded, platform-independent random streams.

Every stream is a counter-based Philox generator keyed by an integer seed plus
optional string/int labels, so independent consumers (splits, corruption,
mask sampling, RFF draws) never share state.
"""
import hashlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("seed components must be non-negative")
        return int(k)
    digest = hashlib.sha256(str(k).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed, *keys) -> int:
    """Deterministic 63-bit seed from a base seed and labels."""
    h = hashlib.sha256()
    for k in (seed,) + keys:
        h.update(str(_key(k)).encode("ascii") + b"/")
    return int.from_bytes(h.digest()[:8], "little") >> 1


def make_rng(seed, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys])
    return np.random.Generator(np.random.Philox(ss))
