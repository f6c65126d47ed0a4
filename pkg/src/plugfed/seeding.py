"""Deterministic sub-seed derivation.

``derive_seed(master, role)`` is defined bit-exactly so that other
implementations can reproduce it:

1. ``h`` = 64-bit FNV-1a of the UTF-8 bytes of ``role``
   (offset basis 0xcbf29ce484222325, prime 0x100000001b3);
2. ``z`` = (``master`` mod 2**64) XOR ``h``;
3. apply the SplitMix64 finaliser to ``z``:
   ``z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9``,
   ``z = (z ^ (z >> 27)) * 0x94d049bb133111eb``,
   ``z = z ^ (z >> 31)``, all modulo 2**64;
4. return ``z >> 1`` (63 bits, so the value is a valid signed 64-bit seed).
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, role: str) -> int:
    return splitmix64((master & MASK64) ^ fnv1a64(role.encode("utf-8"))) >> 1
