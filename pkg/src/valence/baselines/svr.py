"""Linear epsilon-insensitive support vector regression, one window at a time.

Solved in the primal by an interior-point method.  Windows far outnumber
features, so each Newton step reduces to a small feature-sized system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve

from ..data import FusedSequence
from .smoothing import SMOOTH_WINDOW, moving_average

EPSILON_GRID = (0.05, 0.1, 0.15, 0.2)
C_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0)


@dataclass(frozen=True)
class SvrModel:
    weights: np.ndarray
    bias: float
    epsilon: float
    C: float

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class SvrSolverConfig:
    max_iter: int = 100
    tol: float = 1e-10
    standardize: bool = True


def svr_objective(X, y, w, b, epsilon, C) -> float:
    r = np.abs(X @ w + b - y) - epsilon
    return 0.5 * float(w @ w) + C * float(np.maximum(r, 0.0).sum())


def _solve_primal(Z: np.ndarray, y: np.ndarray, eps: float, C: float, max_iter: int, tol: float):
    """Mehrotra predictor-corrector interior point on the slack-form primal.

    Variables v = (w, b), xi, xs (upper/lower tube slacks); four blocks of
    inequalities, each of length N:
        y - Av <= eps + xi,   Av - y <= eps + xs,   xi >= 0,   xs >= 0.
    The slack variables are eliminated from each Newton system, leaving a
    (F+1) x (F+1) positive-definite solve, so an iteration costs O(N F^2).
    """
    n, d = Z.shape
    A = np.hstack([Z, np.ones((n, 1))])
    reg = np.ones(d + 1)
    reg[-1] = 0.0  # the intercept is not regularised
    v = np.zeros(d + 1)
    xi = np.abs(y) + 1.0
    xs = xi.copy()
    r = A @ v - y
    s = np.stack([eps + xi + r, eps + xs - r, xi, xs])
    # lam = C/2 everywhere makes the starting point dual feasible
    lam = np.full((4, n), C / 2.0)
    m = 4 * n
    it = 0
    for it in range(max_iter):
        r = A @ v - y
        rd_v = reg * v + A.T @ (lam[1] - lam[0])
        rd_xi = C - lam[0] - lam[2]
        rd_xs = C - lam[1] - lam[3]
        rp = np.stack([-r - xi - eps, r - xs - eps, -xi, -xs]) + s
        mu = float((s * lam).sum()) / m
        pobj = 0.5 * float(v[:d] @ v[:d]) + C * float(xi.sum() + xs.sum())
        dual_res = max(np.abs(rd_v).max(), np.abs(rd_xi).max(), np.abs(rd_xs).max())
        if mu * m <= tol * max(1.0, abs(pobj)) and np.abs(rp).max() < 1e-9 and dual_res < 1e-9 * max(1.0, C):
            break
        D = lam / s
        E = D[0] * D[2] / (D[0] + D[2]) + D[1] * D[3] / (D[1] + D[3])
        M = (A * E[:, None]).T @ A
        M[np.diag_indices(d + 1)] += reg
        try:
            fac = cho_factor(M)
            solve = cho_solve
        except LinAlgError:
            # rounding breaks definiteness once some of E are huge and N < F; LU copes
            fac = lu_factor(M)
            solve = lu_solve

        def newton(rc):
            q = (lam * rp - rc) / s
            bv = -rd_v - A.T @ (q[1] - q[0])
            bxi = -rd_xi + q[0] + q[2]
            bxs = -rd_xs + q[1] + q[3]
            rhs = bv - A.T @ (D[0] * bxi / (D[0] + D[2])) + A.T @ (D[1] * bxs / (D[1] + D[3]))
            dv = solve(fac, rhs)
            Adv = A @ dv
            dxi = (bxi - D[0] * Adv) / (D[0] + D[2])
            dxs = (bxs + D[1] * Adv) / (D[1] + D[3])
            Gdx = np.stack([-Adv - dxi, Adv - dxs, -dxi, -dxs])
            return dv, dxi, dxs, -rp - Gdx, D * Gdx + q

        aff = newton(s * lam)
        a_aff = _max_step(s, aff[3], lam, aff[4])
        mu_aff = float(((s + a_aff * aff[3]) * (lam + a_aff * aff[4])).sum()) / m
        sigma = (mu_aff / mu) ** 3
        dv, dxi, dxs, ds, dl = newton(s * lam + aff[3] * aff[4] - sigma * mu)
        a = min(1.0, 0.99 * _max_step(s, ds, lam, dl))
        v += a * dv
        xi += a * dxi
        xs += a * dxs
        s += a * ds
        lam += a * dl
    return v[:d], float(v[d]), it


def _max_step(s, ds, lam, dl) -> float:
    a = 1.0
    for x, dx in ((s, ds), (lam, dl)):
        neg = dx < 0
        if neg.any():
            a = min(a, float((-x[neg] / dx[neg]).min()))
    return a


def train_svr(windows, labels, epsilon: float, C: float, config: SvrSolverConfig | None = None) -> SvrModel:
    """Fit ``min 0.5|w|^2 + C sum max(0, |w.x + b - y| - epsilon)``.

    With ``standardize`` the problem is solved on z-scored features and the
    scaling is folded back into the returned weights.
    """
    cfg = config or SvrSolverConfig()
    X = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("train_svr needs a non-empty (N, F) window matrix")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} windows but {y.shape[0]} labels")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite features or labels")
    if epsilon < 0 or C <= 0:
        raise ValueError("need epsilon >= 0 and C > 0")
    if cfg.standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        Z = (X - mu) / sd
    else:
        mu, sd, Z = np.zeros(X.shape[1]), np.ones(X.shape[1]), X
    w, b, _ = _solve_primal(Z, y, float(epsilon), float(C), cfg.max_iter, cfg.tol)
    weights = w / sd
    bias = b - float(weights @ mu)
    return SvrModel(weights=weights, bias=float(bias), epsilon=float(epsilon), C=float(C))


def predict_raw(model: SvrModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match model ({model.n_features})")
    return X @ model.weights + model.bias


def predict_svr(model: SvrModel, seq: FusedSequence | np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Per-window prediction, centred moving average, then clip to [-1, 1]."""
    feats = seq.features if isinstance(seq, FusedSequence) else seq
    return np.clip(moving_average(predict_raw(model, feats), window), -1.0, 1.0)


def grid_search_svr(train, val, eps_grid=EPSILON_GRID, c_grid=C_GRID, config: SvrSolverConfig | None = None):
    """Fit every (epsilon, C) on Train windows, score by mean Validation CCC.

    ``train``/``val`` are lists of ``(features, gold)`` pairs.  Ties go to the
    smaller C, then the larger epsilon.  Returns the best model and the
    grid of scores keyed by ``(epsilon, C)``.
    """
    from ..metrics import ccc

    X = np.concatenate([f for f, _ in train])
    y = np.concatenate([g for _, g in train])
    scores: dict[tuple[float, float], float] = {}
    best, best_key = None, None
    for C in c_grid:
        for eps in sorted(eps_grid, reverse=True):
            model = train_svr(X, y, eps, C, config)
            s = float(np.mean([ccc(predict_svr(model, f), g) for f, g in val]))
            scores[(eps, C)] = s
            if best is None or s > scores[best_key]:
                best, best_key = model, (eps, C)
    return best, scores
