"""Seed derivation. Every random stream in the package comes from here."""

import hashlib

import numpy as np


def derive_seed(seed, *keys):
    """Stable 64-bit sub-seed for ``(seed, *keys)``.

    Uses SHA-256 over the textual form, so the result does not depend on
    Python's hash randomization, platform, or call order.
    """
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
