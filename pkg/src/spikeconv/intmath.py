"""Integer helpers: a single rounding rule and saturating 32-bit state."""

from __future__ import annotations

import numpy as np

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def round_half_away(x):
    """Round to nearest integer, ties away from zero (``round(2.5) == 3``,
    ``round(-2.5) == -3``). Returns int64 for arrays, ``int`` for scalars."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.sign(arr) * np.floor(np.abs(arr) + 0.5)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def saturate(x: np.ndarray, lo: int = INT32_MIN, hi: int = INT32_MAX) -> tuple[np.ndarray, bool]:
    """Clamp ``x`` into ``[lo, hi]``; the flag reports whether anything was clamped."""
    over = bool(np.any(x > hi) or np.any(x < lo))
    if over:
        x = np.clip(x, lo, hi)
    return x, over


def is_power_of_two(value: float) -> bool:
    if value < 1 or value != int(value):
        return False
    n = int(value)
    return n & (n - 1) == 0
