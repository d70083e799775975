"""Labeled child random streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, label: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *words])


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Return a generator for ``label`` (e.g. ``"split"``, ``"sampler:epoch3"``).

    Streams for distinct labels are independent; the same ``(seed, label)``
    always yields the same stream.
    """
    return np.random.default_rng(child_seed(seed, label))
