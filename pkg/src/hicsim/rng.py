"""Counter-based random streams.

Every random draw in the simulator is a pure function of a seed and an integer
key tuple, e.g. ``(purpose, array_id, plane, row, col, event_counter)``.  Draws
therefore do not depend on evaluation order, which keeps device trajectories
reproducible when arrays are updated in different orders or in chunks.

Two flavours are provided:

* :meth:`CounterRNG.normal` / :meth:`CounterRNG.uniform` hash each key tuple
  independently (SplitMix64 finalizer chain).  Used for sparse per-device
  programming events.
* :meth:`CounterRNG.generator` returns a Philox generator keyed by the hash of
  a key tuple.  Used for dense blocks such as one read of a whole array.
"""
from __future__ import annotations

import numpy as np

# draw purposes
WRITE = 1
DRIFT = 2
READ = 3
ROUND = 4
INIT = 5
SHUFFLE = 6
DATA = 7

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(k) -> np.ndarray:
    a = np.asarray(k)
    if a.dtype.kind == "u":
        return a.astype(np.uint64)
    if a.dtype.kind in "iub":
        return a.astype(np.int64).astype(np.uint64)
    raise TypeError(f"random keys must be integers, got dtype {a.dtype}")


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Hash a broadcastable tuple of integer keys to uint64 words."""
    with np.errstate(over="ignore"):
        h = np.atleast_1d(np.asarray(seed & _MASK64, dtype=np.uint64))
        h = _mix(h + _GOLDEN)
        for k in keys:
            h = _mix(h ^ (_as_u64(k) + _GOLDEN))
            h = _mix(h + _GOLDEN)
    return h


def _unit(h: np.ndarray) -> np.ndarray:
    # 53-bit mantissa, open interval (0, 1)
    return ((h >> _S11).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


class CounterRNG:
    """Deterministic keyed random source.

    ``stream`` separates otherwise identical simulations (e.g. distinct
    inference runs over the same trained weights).
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)

    def __repr__(self):
        return f"CounterRNG(seed={self.seed}, stream={self.stream})"

    def with_stream(self, stream: int) -> "CounterRNG":
        return CounterRNG(self.seed, stream)

    def _base(self, purpose, keys):
        return hash_keys(self.seed, self.stream, purpose, *keys)

    def uniform(self, purpose: int, *keys) -> np.ndarray:
        with np.errstate(over="ignore"):
            return _unit(_mix(self._base(purpose, keys) ^ _M1))

    def normal(self, purpose: int, *keys) -> np.ndarray:
        """Standard normal draws, one per broadcast key tuple (Box-Muller)."""
        h = self._base(purpose, keys)
        with np.errstate(over="ignore"):
            u1 = _unit(_mix(h ^ _M1))
            u2 = _unit(_mix(h ^ _M2))
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def generator(self, purpose: int, *keys) -> np.random.Generator:
        """Philox generator for a dense block keyed by ``keys``."""
        h = self._base(purpose, keys)
        with np.errstate(over="ignore"):
            h2 = _mix(h ^ _M2)
        key = (int(h[0]) << 64) | int(h2[0])
        return np.random.Generator(np.random.Philox(key=key))
