"""Keyed random streams.

A stream seed is a 64-bit value derived from a tuple of integers, so the
random choices of, say, environment 5 in iteration 12 do not depend on which
worker ran it or in which order.
"""

_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    # splitmix64 finalizer
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_seed(*keys: int) -> int:
    h = 0
    for k in keys:
        h = _mix(h ^ (int(k) & _MASK))
    return h


# stream tags keep unrelated uses of the same seed apart
ROLLOUT = 1
ACTION_ORDER = 2
EPISODE = 3
