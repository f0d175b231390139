"""Shared uniform index sampling used by prompting and aggregation."""
from __future__ import annotations

import math

from .errors import InputError


def round_half_up(value: float) -> int:
    """Round with halves away from zero, independent of banker's rounding."""
    return int(math.floor(value + 0.5))


def uniform_sample_indices(n: int, k: int) -> list[int]:
    """k indices spread uniformly over 0..n-1, duplicates removed.

    Index i maps to round(i * (n - 1) / (k - 1)); k = 1 yields the middle
    index. The result is sorted and may be shorter than k when n < k.
    """
    if n < 1:
        raise InputError(f"cannot sample from {n} items")
    if k < 1:
        raise InputError(f"sample count must be >= 1, got {k}")
    if k == 1:
        return [round_half_up((n - 1) / 2)]
    picked = [round_half_up(i * (n - 1) / (k - 1)) for i in range(k)]
    return sorted(set(picked))
