"""Supervised HMM over discretised valence with diagonal-GMM emissions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .. import _kernels
from ..data import FusedSequence
from .smoothing import SMOOTH_WINDOW, moving_average

log = logging.getLogger(__name__)

BIN_GRID = (2, 4, 8)
COMPONENT_GRID = (1, 2, 3)
VAR_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, F)
    variances: np.ndarray  # (K, F)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def component_loglik(self, X: np.ndarray) -> np.ndarray:
        """(N, K) log of weight_k * N(x | mean_k, diag var_k)."""
        inv = 1.0 / self.variances
        # expand the quadratic form so the cost is matrix products, not (N, K, F)
        quad = (X * X) @ inv.T - 2.0 * X @ (self.means * inv).T + np.sum(self.means**2 * inv, axis=1)
        norm = np.sum(np.log(self.variances), axis=1) + X.shape[1] * LOG_2PI
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        return lw - 0.5 * (quad + norm)

    def loglik(self, X: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_loglik(X), axis=1)


@dataclass(frozen=True)
class HmmModel:
    n_bins: int
    bin_edges: np.ndarray
    initial: np.ndarray
    transition: np.ndarray
    emissions: tuple[GaussianMixture, ...]
    equal_frequency: bool = False

    @property
    def n_features(self) -> int:
        return self.emissions[0].means.shape[1]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def log_emissions(self, X: np.ndarray) -> np.ndarray:
        return np.stack([g.loglik(X) for g in self.emissions], axis=1)


# ---------------------------------------------------------------------------
# discretisation
# ---------------------------------------------------------------------------


def equal_width_edges(n_bins: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n_bins + 1)


def equal_frequency_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Quantile edges with the outer edges pinned to [-1, 1]."""
    q = np.quantile(np.asarray(values, dtype=np.float64), np.linspace(0, 1, n_bins + 1))
    q[0], q[-1] = -1.0, 1.0
    return np.maximum.accumulate(q)


def discretize(gold, n_bins: int, edges: np.ndarray | None = None) -> np.ndarray:
    """Bin index per sample; bins are half-open [lo, hi) except the top one."""
    if n_bins not in BIN_GRID:
        raise ValueError(f"n_bins must be one of {BIN_GRID}, got {n_bins}")
    g = np.asarray(gold, dtype=np.float64)
    if not np.all(np.isfinite(g)) or np.any(g < -1.0) or np.any(g > 1.0):
        raise ValueError("valence values must lie in [-1, 1]")
    if edges is None:
        idx = np.floor((g + 1.0) / 2.0 * n_bins).astype(np.int64)
    else:
        idx = np.searchsorted(edges, g, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


def decode_to_valence(bins, n_bins: int | None = None, centers: np.ndarray | None = None, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Bin centres, then the centred moving average used for the SVR."""
    if centers is None:
        centers = 0.5 * (equal_width_edges(n_bins)[:-1] + equal_width_edges(n_bins)[1:])
    return moving_average(np.asarray(centers)[np.asarray(bins, dtype=np.int64)], window)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _kmeans_init(X, k, rng):
    """k-means++ seeding plus a few Lloyd iterations; returns hard labels."""
    n = X.shape[0]
    centres = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centres], axis=0)
        total = d2.sum()
        centres.append(X[rng.integers(n)] if total == 0 else X[rng.choice(n, p=d2 / total)])
    C = np.array(centres)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(10):
        d2 = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            if np.any(labels == j):
                C[j] = X[labels == j].mean(axis=0)
    return labels


def _mstep(X, resp, var_floor):
    nk = resp.sum(axis=0) + 1e-300
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    second = (resp.T @ (X * X)) / nk[:, None]
    variances = np.maximum(second - means**2, var_floor)
    return GaussianMixture(weights, means, variances)


def fit_gmm(X, n_components: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6, var_floor: float = VAR_FLOOR, history: list | None = None) -> GaussianMixture:
    """Diagonal GMM by EM.  Stops when the mean log-likelihood gain < ``tol``."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    k = max(1, min(n_components, n))
    rng = np.random.default_rng(seed)
    labels = _kmeans_init(X, k, rng) if k > 1 else np.zeros(n, dtype=np.int64)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    gmm = _mstep(X, resp, var_floor)
    prev = -np.inf
    for _ in range(max_iter):
        comp = gmm.component_loglik(X)
        ll = logsumexp(comp, axis=1)
        cur = float(ll.mean())
        if history is not None:
            history.append(cur)
        assert cur >= prev - 1e-9 * max(1.0, abs(prev)), f"EM log-likelihood decreased: {prev} -> {cur}"
        if cur - prev < tol:
            break
        prev = cur
        resp = np.exp(comp - ll[:, None])
        gmm = _mstep(X, resp, var_floor)
    if k < n_components:
        pad = n_components - k
        gmm = GaussianMixture(
            np.concatenate([gmm.weights, np.zeros(pad)]),
            np.vstack([gmm.means, np.repeat(gmm.means[:1], pad, axis=0)]),
            np.vstack([gmm.variances, np.repeat(gmm.variances[:1], pad, axis=0)]),
        )
    return gmm


def transition_counts(label_seqs: Sequence[np.ndarray], n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    init = np.zeros(n_bins)
    trans = np.zeros((n_bins, n_bins))
    for s in label_seqs:
        s = np.asarray(s, dtype=np.int64)
        if s.size == 0:
            continue
        init[s[0]] += 1
        np.add.at(trans, (s[:-1], s[1:]), 1)
    return init, trans


def fit_hmm(
    sequences: Sequence[np.ndarray],
    gold_tracks: Sequence[np.ndarray],
    n_bins: int,
    n_components: int,
    seed: int = 0,
    equal_frequency: bool = False,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> HmmModel:
    """Count-based initial/transition probabilities (add-one), per-bin GMM emissions."""
    if n_bins not in BIN_GRID:
        raise ValueError(f"n_bins must be one of {BIN_GRID}, got {n_bins}")
    if len(sequences) != len(gold_tracks) or not sequences:
        raise ValueError("need matching, non-empty feature and gold sequence lists")
    all_gold = np.concatenate([np.asarray(g, dtype=np.float64) for g in gold_tracks])
    if equal_frequency:
        edges = equal_frequency_edges(all_gold, n_bins)
        labels = [discretize(g, n_bins, edges) for g in gold_tracks]
    else:
        edges = equal_width_edges(n_bins)
        labels = [discretize(g, n_bins) for g in gold_tracks]
    init, trans = transition_counts(labels, n_bins)
    initial = (init + 1.0) / (init + 1.0).sum()
    transition = (trans + 1.0) / (trans + 1.0).sum(axis=1, keepdims=True)
    X = np.concatenate([np.asarray(x, dtype=np.float64) for x in sequences])
    lab = np.concatenate(labels)
    if X.shape[0] != lab.shape[0]:
        raise ValueError("feature windows and gold samples differ in count")
    fallback = None
    emissions = []
    for b in range(n_bins):
        Xb = X[lab == b]
        if Xb.shape[0] == 0:
            log.info("bin %d has no training windows; using the global single-Gaussian fit", b)
            if fallback is None:
                fallback = fit_gmm(X, 1, seed=seed, max_iter=max_iter, tol=tol)
            g = fallback
            if n_components > 1:
                g = GaussianMixture(
                    np.concatenate([[1.0], np.zeros(n_components - 1)]),
                    np.repeat(g.means, n_components, axis=0),
                    np.repeat(g.variances, n_components, axis=0),
                )
            emissions.append(g)
        else:
            emissions.append(fit_gmm(Xb, n_components, seed=seed + b, max_iter=max_iter, tol=tol))
    return HmmModel(n_bins, edges, initial, transition, tuple(emissions), equal_frequency)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def viterbi_logspace(log_init, log_trans, log_emit) -> tuple[np.ndarray, float]:
    log_emit = np.asarray(log_emit, dtype=np.float64)
    path, score = _kernels.viterbi(np.asarray(log_init), np.asarray(log_trans), log_emit)
    if not np.isfinite(score):
        raise FloatingPointError("Viterbi path score is not finite")
    return path, score


def viterbi(model: HmmModel, seq: FusedSequence | np.ndarray) -> np.ndarray:
    X = seq.features if isinstance(seq, FusedSequence) else np.asarray(seq, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match model ({model.n_features})")
    path, _ = viterbi_logspace(np.log(model.initial), np.log(model.transition), model.log_emissions(X))
    return path


def path_logprob(log_init, log_trans, log_emit, path) -> float:
    path = np.asarray(path, dtype=np.int64)
    s = log_init[path[0]] + log_emit[0, path[0]]
    for t in range(1, path.shape[0]):
        s += log_trans[path[t - 1], path[t]] + log_emit[t, path[t]]
    return float(s)


def predict_hmm(model: HmmModel, seq: FusedSequence | np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    return decode_to_valence(viterbi(model, seq), centers=model.centers, window=window)


def grid_search_hmm(train, val, bin_grid=BIN_GRID, component_grid=COMPONENT_GRID, seed: int = 0, equal_frequency: bool = False):
    """Fit every (n_bins, n_components), score by mean Validation CCC.

    Ties go to fewer bins, then fewer components.
    """
    from ..metrics import ccc

    feats = [f for f, _ in train]
    golds = [g for _, g in train]
    scores: dict[tuple[int, int], float] = {}
    best, best_key = None, None
    for nb in sorted(bin_grid):
        for nc in sorted(component_grid):
            model = fit_hmm(feats, golds, nb, nc, seed=seed, equal_frequency=equal_frequency)
            s = float(np.mean([ccc(predict_hmm(model, f), g) for f, g in val]))
            scores[(nb, nc)] = s
            if best is None or s > scores[best_key]:
                best, best_key = model, (nb, nc)
    return best, scores
