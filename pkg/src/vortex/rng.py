"""Keyed, counter-based random streams.

Every stochastic draw in the package comes from a Philox generator whose
128-bit key is derived by hashing an explicit tuple of key parts (seed,
purpose string, epoch, example id, ...).  Two consequences:

* the same key always yields the same draws, on any platform and in any
  evaluation order -- there is no hidden global RNG state to serialize;
* independent keys yield independent streams, so data loading and
  augmentation can run in parallel workers without changing results.
"""

from __future__ import annotations

import hashlib

import numpy as np

_ENCODERS = {
    int: lambda v: b"i" + str(v).encode(),
    str: lambda v: b"s" + v.encode("utf-8"),
    float: lambda v: b"f" + repr(v).encode(),
    bytes: lambda v: b"b" + v,
    bool: lambda v: b"t" + str(v).encode(),
}


def _digest(parts: tuple) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        enc = _ENCODERS.get(type(p))
        if enc is None:
            raise TypeError(f"unhashable key part of type {type(p).__name__}: {p!r}")
        blob = enc(p)
        h.update(len(blob).to_bytes(4, "little"))
        h.update(blob)
    return h.digest()


def stream(*parts) -> np.random.Generator:
    """Return a Generator keyed by ``parts`` (ints, strings, floats, bytes)."""
    key = int.from_bytes(_digest(parts)[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def hash64(*parts) -> int:
    """Stable 64-bit hash of ``parts``; used to derive per-scan seeds."""
    return int.from_bytes(_digest(parts)[:8], "little")
