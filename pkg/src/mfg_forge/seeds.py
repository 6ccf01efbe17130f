"""Labelled seed streams.

``seed_derivation(master, label)`` hashes the label with BLAKE2b (8-byte
digest), xors it into the master seed, and finalizes with two rounds of the
splitmix64 mixer. Labels are slash-separated paths such as ``"inner/3/7"``.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def seed_derivation(master: int, label: str) -> int:
    h = int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")
    return splitmix64(splitmix64(int(master) & _MASK) ^ h)
