"""Counter-based random streams with documented, portable splitting.

All randomness in the package flows through Philox4x64-10 counter-based
generators.  A stream is addressed by a 64-bit master seed plus a path of
small integers; the 128-bit Philox key is

    key = [seed, h]      h = mix(seed); h = mix(h ^ (1 + element))  per path element

where ``mix`` is the splitmix64 finalizer.  Distinct paths give distinct
keys, hence statistically independent counter-based streams, and the
derivation depends only on integer arithmetic, so any implementation of
splitmix64 + Philox can reproduce the raw streams.  (Values drawn through
numpy transformations such as ``standard_normal`` additionally pin the
numpy bit-stream algorithms.)

Purpose tags below name the conventional path roots used by the harness;
repetition indices are appended after the tag.
"""

import numpy as np

__all__ = [
    "mix64",
    "derive",
    "stream",
    "PURPOSE_SIGNAL",
    "PURPOSE_IMAGES",
    "PURPOSE_RESPONSES",
    "PURPOSE_TEST_IMAGES",
    "PURPOSE_TEST_RESPONSES",
    "PURPOSE_PROBE",
    "PURPOSE_RESEED",
    "PURPOSE_REPETITION",
]

_MASK = (1 << 64) - 1

PURPOSE_SIGNAL = 1
PURPOSE_IMAGES = 2
PURPOSE_RESPONSES = 3
PURPOSE_TEST_IMAGES = 4
PURPOSE_TEST_RESPONSES = 5
PURPOSE_PROBE = 6
PURPOSE_RESEED = 7
PURPOSE_REPETITION = 8


def mix64(x):
    """splitmix64 finalizer; bijective on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive(seed, *path):
    """64-bit sub-seed for (seed, path); equals the low key word of :func:`stream`."""
    h = mix64(int(seed) & _MASK)
    for element in path:
        e = int(element)
        if e < 0:
            raise ValueError(f"path elements must be nonnegative, got {e}")
        h = mix64(h ^ (1 + e))
    return h


def stream(seed, *path):
    """numpy Generator over Philox keyed by (seed, path) as documented above."""
    key = np.array([int(seed) & _MASK, derive(seed, *path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
