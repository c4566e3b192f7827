"""Hot numeric loops, compiled with numba when available.

Set ``VALENCE_DISABLE_NUMBA=1`` to force the pure-numpy implementations
(useful for debugging and for the kernel benchmark).  Both paths compute
the same thing; the numba ones are written as explicit loops, the numpy
ones are vectorised where the algorithm allows it.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("VALENCE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by VALENCE_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# moving average (centred, truncated at the edges)
# ---------------------------------------------------------------------------


def moving_average_numpy(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    half = window // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + window - half, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def _moving_average_loop(x, window):
    n = x.shape[0]
    half = window // 2
    out = np.empty(n)
    for t in range(n):
        lo = max(t - half, 0)
        hi = min(t + window - half, n)
        s = 0.0
        for k in range(lo, hi):
            s += x[k]
        out[t] = s / (hi - lo)
    return out


# ---------------------------------------------------------------------------
# window averaging for resampling
# ---------------------------------------------------------------------------


def window_mean_numpy(assign: np.ndarray, frames: np.ndarray, n_windows: int):
    """Average rows of ``frames`` into ``n_windows`` bins given by ``assign``.

    Rows with ``assign`` outside ``[0, n_windows)`` are ignored.  Returns the
    (n_windows, D) means (zero where empty) and per-window counts.
    """
    keep = (assign >= 0) & (assign < n_windows)
    a = assign[keep]
    f = frames[keep]
    sums = np.zeros((n_windows, frames.shape[1]))
    np.add.at(sums, a, f)
    counts = np.bincount(a, minlength=n_windows).astype(np.int64)
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out, counts


def _window_mean_loop(assign, frames, n_windows):
    d = frames.shape[1]
    sums = np.zeros((n_windows, d))
    counts = np.zeros(n_windows, dtype=np.int64)
    for i in range(frames.shape[0]):
        a = assign[i]
        if a < 0 or a >= n_windows:
            continue
        counts[a] += 1
        for j in range(d):
            sums[a, j] += frames[i, j]
    for a in range(n_windows):
        if counts[a] > 0:
            for j in range(d):
                sums[a, j] /= counts[a]
    return sums, counts


# ---------------------------------------------------------------------------
# Viterbi (log domain, ties toward the lower state index)
# ---------------------------------------------------------------------------


def viterbi_numpy(log_init: np.ndarray, log_trans: np.ndarray, log_emit: np.ndarray):
    T, S = log_emit.shape
    back = np.zeros((T, S), dtype=np.int64)
    delta = log_init + log_emit[0]
    for t in range(1, T):
        cand = delta[:, None] + log_trans  # (from, to)
        back[t] = np.argmax(cand, axis=0)  # first maximum -> lowest index
        delta = cand[back[t], np.arange(S)] + log_emit[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    score = float(delta[path[-1]])
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


def _viterbi_loop(log_init, log_trans, log_emit):
    T, S = log_emit.shape
    back = np.zeros((T, S), dtype=np.int64)
    delta = np.empty(S)
    new = np.empty(S)
    for s in range(S):
        delta[s] = log_init[s] + log_emit[0, s]
    for t in range(1, T):
        for s in range(S):
            best = delta[0] + log_trans[0, s]
            arg = 0
            for r in range(1, S):
                v = delta[r] + log_trans[r, s]
                if v > best:
                    best = v
                    arg = r
            back[t, s] = arg
            new[s] = best + log_emit[t, s]
        for s in range(S):
            delta[s] = new[s]
    path = np.empty(T, dtype=np.int64)
    arg = 0
    for s in range(1, S):
        if delta[s] > delta[arg]:
            arg = s
    path[T - 1] = arg
    score = delta[arg]
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


if NUMBA_ENABLED:
    moving_average_numba = njit(cache=True)(_moving_average_loop)
    window_mean_numba = njit(cache=True)(_window_mean_loop)
    viterbi_numba = njit(cache=True)(_viterbi_loop)

    def moving_average(x, window):
        return moving_average_numba(np.ascontiguousarray(x, dtype=np.float64), int(window))

    def window_mean(assign, frames, n_windows):
        return window_mean_numba(
            np.ascontiguousarray(assign, dtype=np.int64),
            np.ascontiguousarray(frames, dtype=np.float64),
            int(n_windows),
        )

    def viterbi(log_init, log_trans, log_emit):
        path, score = viterbi_numba(
            np.ascontiguousarray(log_init, dtype=np.float64),
            np.ascontiguousarray(log_trans, dtype=np.float64),
            np.ascontiguousarray(log_emit, dtype=np.float64),
        )
        return path, float(score)

else:  # pragma: no cover - exercised only without numba
    moving_average = moving_average_numpy
    window_mean = window_mean_numpy
    viterbi = viterbi_numpy
