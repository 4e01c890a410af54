"""Counter-based random streams.

Each trial owns a 64-bit key.  The uniform used for a given stochastic choice
is addressed by ``(key, step, slot)`` and computed with the SplitMix64 output
function, so nothing is consumed statefully: the value of a draw never depends
on which other draws happened before it.  That gives three properties the
simulator relies on:

* trials are reproducible and independent of scheduling or chunking;
* policies that share a key see identical randomness (natural coupling);
* the scalar engine and the vectorised engine agree bit-for-bit.

The scalar helpers use Python integers masked to 64 bits and the array
helpers use wrapping ``uint64`` arithmetic; both yield the same bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB
_INV_2_53 = 2.0**-53

# Slot layout within a step.
TIE = 0
SWITCH = 1
ACTION = 2
EXPLORE = 3
UNIFORM_ACTION = 4
OBSERVATION = 5
N_SLOTS = 8


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def _counter(step: int, slot: int) -> int:
    return (step * N_SLOTS + slot + 1) & MASK64


def uniform(key: int, step: int, slot: int) -> float:
    z = mix64(key + ((_counter(step, slot) * GOLDEN_GAMMA) & MASK64))
    return (z >> 11) * _INV_2_53


def uniform_array(keys: np.ndarray, step: int, slot: int) -> np.ndarray:
    offset = np.uint64((_counter(step, slot) * GOLDEN_GAMMA) & MASK64)
    z = mix64_array(np.asarray(keys, dtype=np.uint64) + offset)
    return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53


def derive_key(*parts: int) -> int:
    """Hash a tuple of non-negative integers into a stream key."""
    k = mix64(GOLDEN_GAMMA)
    for p in parts:
        k = mix64(k + (((int(p) & MASK64) + 1) * GOLDEN_GAMMA & MASK64))
    return k


def trial_keys(base_seed: int, hypothesis: int, cell: int, trial_ids: np.ndarray) -> np.ndarray:
    """Keys for ``derive_key(base_seed, hypothesis, cell, t)`` for every ``t``."""
    prefix = derive_key(base_seed, hypothesis, cell)
    t = np.asarray(trial_ids, dtype=np.uint64)
    return mix64_array(np.uint64(prefix) + (t + np.uint64(1)) * np.uint64(GOLDEN_GAMMA))


@dataclass(frozen=True)
class TrialStream:
    """The per-trial random stream handed to policies and the scalar engine."""

    key: int

    @classmethod
    def for_trial(cls, base_seed: int, hypothesis: int, cell: int, trial: int) -> TrialStream:
        return cls(int(trial_keys(base_seed, hypothesis, cell, np.array([trial]))[0]))

    def uniform(self, step: int, slot: int) -> float:
        return uniform(self.key, step, slot)
