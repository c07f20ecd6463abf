"""Counter-based random streams addressed by a (seed, stream) pair.

The generator behind every draw in this package is numpy's Philox 4x64, a
counter-based PRNG whose 128-bit key we fill with the pair
``(seed, stream)``. Distinct keys give statistically independent streams,
so any component can be handed its own stream id and produce the same
values no matter when, or on how many threads, the draws happen. Normal
variates come from numpy's ziggurat implementation of
``standard_normal``; sequences are reproducible run to run on a fixed
numpy version (the algorithm choice is numpy's, not re-derived here, so
other libraries will not bitwise-match).

Stream ids are structured, not sequential. ``stream_id`` packs a role tag
and two indices (typically view and window) into one 64-bit value so that
every (role, view, window) triple draws from its own stream and no two
components can collide by accident.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ParameterError

_U64 = np.uint64
_MASK_64 = (1 << 64) - 1

# Role tags for derived streams. Kept small and spaced; the packing below
# leaves 24 bits for each of the two indices.
ROLE_AR_INNOVATION = 1
ROLE_SHARED = 2
ROLE_OBSERVATION = 3
ROLE_REFINE = 4  # refinement iteration l is added to the role field
ROLE_ENCODER_INIT = 5


def stream_id(role: int, a: int = 0, b: int = 0) -> int:
    """Pack (role, a, b) into a single 64-bit stream id.

    Layout: role in bits 48..63, ``a`` in bits 24..47, ``b`` in bits
    0..23. Raises ParameterError when a field does not fit.
    """
    if not 0 <= role < (1 << 16):
        raise ParameterError(f"role {role} outside [0, 2^16)")
    if not 0 <= a < (1 << 24):
        raise ParameterError(f"stream index a={a} outside [0, 2^24)")
    if not 0 <= b < (1 << 24):
        raise ParameterError(f"stream index b={b} outside [0, 2^24)")
    return (role << 48) | (a << 24) | b


class RngState:
    """One addressed random stream.

    Parameters
    ----------
    seed : int
        Master seed, any value in [0, 2^64).
    stream : int
        Stream id in [0, 2^64). Same seed + different stream gives an
        independent sequence.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise ParameterError(f"seed must be an integer, got {seed!r}")
        if not isinstance(stream, (int, np.integer)) or isinstance(stream, bool):
            raise ParameterError(f"stream must be an integer, got {stream!r}")
        if not 0 <= int(seed) <= _MASK_64:
            raise ParameterError(f"seed {seed} outside [0, 2^64)")
        if not 0 <= int(stream) <= _MASK_64:
            raise ParameterError(f"stream {stream} outside [0, 2^64)")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=_U64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream: int) -> "RngState":
        """A fresh stream under the same seed. Does not advance this one."""
        return RngState(self.seed, stream)

    def derived(self, role: int, a: int = 0, b: int = 0) -> "RngState":
        """Substream addressed by a packed (role, a, b) id."""
        return self.substream(stream_id(role, a, b))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream})"
