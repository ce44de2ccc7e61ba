"""Counter-based random streams (Philox4x64-10) usable from compiled kernels.

Every particle draws from its own stream keyed by ``(seed, stream_id)`` with
the particle index in the counter, so a particle's random numbers are a pure
function of ``(seed, stream_id, particle)`` and do not depend on how the batch
is split across threads.  Output blocks are bit-identical to
``numpy.random.Philox`` for the same key and counter.
"""

from __future__ import annotations

import numba
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)
_FOUR = np.uint64(4)
_INV53 = 1.0 / 9007199254740992.0

# state layout: key0, key1, block, particle, buf0..buf3, buffer position
STATE_SIZE = 9


@numba.njit(inline="always", cache=True)
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


@numba.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """One Philox4x64-10 block for counter (c0..c3) and key (k0, k1)."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True)
def stream_init(state, seed, stream_id, particle):
    state[0] = np.uint64(seed)
    state[1] = np.uint64(stream_id)
    state[2] = _ZERO
    state[3] = np.uint64(particle)
    state[8] = _FOUR


@numba.njit(cache=True)
def next_u64(state):
    pos = state[8]
    if pos >= _FOUR:
        o0, o1, o2, o3 = philox4x64(state[2], state[3], _ZERO, _ZERO, state[0], state[1])
        state[4] = o0
        state[5] = o1
        state[6] = o2
        state[7] = o3
        state[2] = state[2] + _ONE
        pos = _ZERO
    out = state[4 + np.int64(pos)]
    state[8] = pos + _ONE
    return out


@numba.njit(cache=True)
def uniform(state):
    """Uniform variate strictly inside (0, 1)."""
    return ((next_u64(state) >> _S11) + 0.5) * _INV53


@numba.njit(cache=True)
def normal_pair(state):
    u1 = uniform(state)
    u2 = uniform(state)
    r = np.sqrt(-2.0 * np.log(u1))
    t = 2.0 * np.pi * u2
    return r * np.cos(t), r * np.sin(t)


@numba.njit(cache=True)
def exponential(state, rate):
    if rate <= 0.0:
        return np.inf
    return -np.log(uniform(state)) / rate


class Stream:
    """Python handle on one counter-based stream.

    Exposes the small subset of ``numpy.random.Generator`` methods that the
    single-step operations use, so either can be passed as ``rng``.
    """

    def __init__(self, seed: int, stream_id: int = 0, particle: int = 0):
        self.state = np.zeros(STATE_SIZE, dtype=np.uint64)
        stream_init(self.state, np.uint64(seed), np.uint64(stream_id), np.uint64(particle))

    def random(self, size=None):
        if size is None:
            return uniform(self.state)
        return np.array([uniform(self.state) for _ in range(int(np.prod(size)))]).reshape(size)

    def standard_normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        out = []
        while len(out) < n:
            out.extend(normal_pair(self.state))
        if size is None:
            return out[0]
        return np.array(out[:n]).reshape(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return loc + scale * self.standard_normal(size)

    def exponential(self, scale=1.0, size=None):
        if size is None:
            return -np.log(uniform(self.state)) * scale
        return np.array([-np.log(uniform(self.state)) * scale for _ in range(int(np.prod(size)))]).reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic 64-bit child seed from a root seed and integer tags."""
    o = philox4x64(
        np.uint64(tags[0] if len(tags) > 0 else 0),
        np.uint64(tags[1] if len(tags) > 1 else 0),
        np.uint64(tags[2] if len(tags) > 2 else 0),
        np.uint64(0x5EED),
        np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
        np.uint64(0xC0FFEE),
    )
    return int(o[0])
