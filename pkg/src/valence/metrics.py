"""Agreement metrics between predicted and gold valence tracks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class MetricError(ValueError):
    """Raised on malformed metric inputs (length mismatch, too short, empty)."""


def _pair(x, y, min_len: int = 2) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < min_len:
        raise MetricError(f"need at least {min_len} samples, got {x.shape[0]}")
    return x, y


def pearson_with_flag(x, y) -> tuple[float, bool]:
    """Sample Pearson correlation and a flag set when either input is constant."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    denom = np.sqrt(sxx * syy)
    if denom == 0.0:
        # the product underflowed; the split form does not
        denom = np.sqrt(sxx) * np.sqrt(syy)
    r = float(dx @ dy) / denom
    return float(np.clip(r, -1.0, 1.0)), False


def pearson(x, y) -> float:
    return pearson_with_flag(x, y)[0]


def ccc(x, y) -> float:
    """Concordance correlation coefficient in covariance form.

    Uses population (1/N) moments. When both inputs are constant the
    denominator vanishes; the result is then 1 for equal means, else 0.
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    n = x.shape[0]
    cov = float(dx @ dy) / n
    vx = float(dx @ dx) / n
    vy = float(dy @ dy) / n
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0 if mx == my else 0.0
    return float(np.clip(2.0 * cov / denom, -1.0, 1.0))


def mse(x, y) -> float:
    x, y = _pair(x, y, min_len=1)
    d = x - y
    return float(d @ d) / d.shape[0]


@dataclass(frozen=True)
class MetricSummary:
    per_video: dict[str, float] = field(default_factory=dict)
    mean: float = 0.0
    sd: float = 0.0

    def format(self, decimals: int = 2) -> str:
        return f"{format_stat(self.mean, decimals)} ({format_stat(self.sd, decimals)})"


def summarize(per_video: Mapping[str, float]) -> MetricSummary:
    """Mean and sample standard deviation (SD = 0 for a single video)."""
    if len(per_video) == 0:
        raise MetricError("cannot summarise an empty score set")
    scores = dict(sorted(per_video.items()))
    vals = np.fromiter(scores.values(), dtype=np.float64)
    sd = float(vals.std(ddof=1)) if vals.shape[0] > 1 else 0.0
    return MetricSummary(per_video=scores, mean=float(vals.mean()), sd=sd)


def format_stat(value: float, decimals: int = 2) -> str:
    """Render like the published tables: ``.40``, ``-.02``, ``1.00``."""
    s = f"{value:.{decimals}f}"
    if s.startswith("0."):
        s = s[1:]
    elif s.startswith("-0."):
        s = "-" + s[2:]
    if s in {"-." + "0" * decimals}:
        s = s[1:]
    return s
