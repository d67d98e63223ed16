"""Deterministic seed derivation.

Stage and epoch seeds are derived statelessly from the global seed with a
splitmix64 walk over the label string, so resuming a run never requires
capturing generator state: the seed for (stage, epoch) is a pure function of
the experiment seed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 step; returns the mixed 64-bit output."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(base: int, *labels) -> int:
    """Derive a child seed from ``base`` and a sequence of str/int labels."""
    state = (int(base) ^ 0xA076_1D64_78BD_642F) & _MASK64
    for label in labels:
        if isinstance(label, int):
            data = label.to_bytes(8, "little", signed=True)
        else:
            data = str(label).encode("utf-8")
        for b in data:
            state = splitmix64((state ^ b) & _MASK64)
    return state


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
