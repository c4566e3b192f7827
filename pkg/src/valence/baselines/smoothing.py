"""Centred moving average used to smooth per-window baseline predictions."""

from __future__ import annotations

import numpy as np

from .. import _kernels

SMOOTH_WINDOW = 5


def moving_average(x, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred moving average; the window shrinks (truncates) at both edges."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    return _kernels.moving_average(x, window)
