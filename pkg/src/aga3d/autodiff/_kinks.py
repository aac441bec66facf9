"""Recording of branch patterns at non-differentiable points (ReLU, max)."""

from contextlib import contextmanager

import numpy as np

_active = []


def record_pattern(mask):
    if _active:
        _active[-1].append(np.array(mask, dtype=bool))


@contextmanager
def recording():
    """Collect every branch mask produced while the block runs."""
    patterns = []
    _active.append(patterns)
    try:
        yield patterns
    finally:
        _active.pop()


def same_patterns(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
