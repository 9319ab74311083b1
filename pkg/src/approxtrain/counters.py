"""Process-wide operation counters.

Kernels and training code bump these so tests can assert on *what* ran
(e.g. that evaluation never touched a proxy activation) without timing.
"""

from collections import Counter
from contextlib import contextmanager

COUNTS: Counter = Counter()


def bump(name: str, amount: int = 1) -> None:
    COUNTS[name] += amount


def reset() -> None:
    COUNTS.clear()


def snapshot() -> dict:
    return dict(COUNTS)


@contextmanager
def counting():
    """Yield a fresh Counter holding only the increments made inside the block."""
    before = Counter(COUNTS)
    delta: Counter = Counter()
    try:
        yield delta
    finally:
        for key, value in COUNTS.items():
            diff = value - before.get(key, 0)
            if diff:
                delta[key] = diff
