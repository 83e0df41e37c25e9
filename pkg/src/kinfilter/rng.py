"""Counter-based Gaussian streams.

Every variate is a pure function of ``(seed, stream, step, channel, index)``.
Paths can therefore be generated in any order, in chunks, or in parallel
without changing a single bit of the result.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4

# stream tags keep independent consumers apart
STREAM_SYSTEM = 0
STREAM_REFERENCE = 1
STREAM_ORACLE = 2
STREAM_AUX = 3


def _raw_words(seed: int, stream: int, step: int, channel: int, start: int, count: int) -> np.ndarray:
    """Return ``count`` raw 64-bit words starting at word index ``start``."""
    if count <= 0:
        return np.zeros(0, dtype=np.uint64)
    block0 = start // _WORDS_PER_BLOCK
    skip = start - block0 * _WORDS_PER_BLOCK
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([block0, step & _MASK64, channel & _MASK64, 0], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=counter)
    words = bg.random_raw(skip + count)
    return np.asarray(words[skip:], dtype=np.uint64)


def _to_open_unit(words: np.ndarray) -> np.ndarray:
    # 53 random bits mapped to the open interval (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, step: int, channel: int, count: int, start: int = 0, stream: int = STREAM_SYSTEM) -> np.ndarray:
    """Standard normal variates for path indices ``start .. start+count-1``.

    Box-Muller on pairs of words; the variate for path ``i`` depends only on
    the pair ``(2*(i//2), 2*(i//2)+1)`` of the counter stream.

    Args:
        seed: user seed (non-negative integer).
        step: time-step index.
        channel: noise channel index.
        count: number of variates.
        start: first path index.
        stream: consumer tag, see the ``STREAM_*`` constants.

    Returns:
        Array of shape ``(count,)``.
    """
    if count <= 0:
        return np.zeros(0)
    lo = start - (start % 2)
    hi = start + count
    hi += hi % 2
    words = _raw_words(seed, stream, step, channel, lo, hi - lo)
    u1 = _to_open_unit(words[0::2])
    u2 = _to_open_unit(words[1::2])
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty(hi - lo)
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    off = start - lo
    return z[off:off + count]


def normal_block(seed: int, n_steps: int, channel: int, count: int, start: int = 0,
                 stream: int = STREAM_SYSTEM, step0: int = 0) -> np.ndarray:
    """Normals of shape ``(n_steps, count)`` for consecutive steps."""
    out = np.empty((n_steps, count))
    for k in range(n_steps):
        out[k] = normals(seed, step0 + k, channel, count, start=start, stream=stream)
    return out


def brownian_increments(seed: int, n_steps: int, dt: float, channel: int = 0, count: int = 1,
                        start: int = 0, stream: int = STREAM_SYSTEM) -> np.ndarray:
    """Brownian increments of shape ``(n_steps, count)`` with variance ``dt``."""
    return np.sqrt(dt) * normal_block(seed, n_steps, channel, count, start=start, stream=stream)
