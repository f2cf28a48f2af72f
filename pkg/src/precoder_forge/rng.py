"""Seeded random streams.

Every stream is a ``numpy.random.Generator`` over the Philox-4x64 counter-based
bit generator, so a given seed produces the same numbers on every platform.
Named sub-streams are derived by hashing ``(seed, *names)`` into a 128-bit
Philox key, which keeps e.g. the channel draw independent of the number of
optimizer restarts.
"""

import hashlib

import numpy as np

GENERATOR_VERSION = "philox4x64-sha256-v1"


def derive_key(seed, *names):
    """128-bit integer key for the stream ``(seed, *names)``."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode())
    return int.from_bytes(h.digest()[:16], "little")


def make_rng(seed, *names):
    """Return a Philox-backed generator for the named sub-stream of ``seed``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *names)))


def derive_seed(seed, *names):
    """Integer seed (63 bits) for a named child stream."""
    return derive_key(seed, *names) & ((1 << 63) - 1)


def complex_normal(rng, shape):
    """Standard circularly-symmetric complex normal, E|z|^2 = 1."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(0.5)
