"""Product-Gaussian kernel density estimation and Nadaraya-Watson regression.

Both estimators follow the scikit-learn estimator protocol. Bandwidths are
per-dimension; ``bandwidth=None`` uses the normal-reference rule and
``bandwidth="cv"`` selects multipliers of that rule by k-fold cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.linear_model import Ridge
from sklearn.preprocessing import SplineTransformer
from sklearn.utils.validation import check_is_fitted

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
UNDERFLOW = np.log(1e-300)

DEFAULT_GRID = (0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0)
PENALTY_GRID = tuple(10.0 ** np.arange(-4, 3.5, 0.5))


@dataclass(frozen=True)
class CvConfig:
    folds: int = 10
    grid: Sequence[float] = DEFAULT_GRID
    seed: int = 0
    density_loss: str = "lscv"
    sweeps: int = 2

    def __post_init__(self):
        if len(self.grid) == 0:
            raise ValueError("bandwidth grid is empty")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.density_loss not in ("lscv", "loglik"):
            raise ValueError(f"unknown density loss {self.density_loss!r}")


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("expected a 2-D table")
    return X


def reference_bandwidth(X) -> np.ndarray:
    """Normal-reference rule ``1.06 * sd * m**(-1/(4+d))`` per dimension."""
    X = _as_2d(X)
    m, d = X.shape
    sd = X.std(axis=0, ddof=1) if m > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return 1.06 * sd * m ** (-1.0 / (4 + d))


def _check_bandwidths(h, d: int) -> np.ndarray:
    h = np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    if np.any(~(h > 0)) or np.any(~np.isfinite(h)):
        raise ValueError(f"bandwidths must be positive, got {h}")
    return h


def log_kernel_matrix(Q, X, h) -> np.ndarray:
    """``log prod_j phi((q_j - x_j)/h_j)/h_j`` for every query/point pair."""
    Zq = Q / h
    Zx = X / h
    sq = (
        np.sum(Zq * Zq, axis=1)[:, None]
        + np.sum(Zx * Zx, axis=1)[None, :]
        - 2.0 * Zq @ Zx.T
    )
    np.maximum(sq, 0.0, out=sq)
    return -0.5 * sq - X.shape[1] * LOG_SQRT_2PI - np.sum(np.log(h))


class KernelDensity(BaseEstimator):
    """Gaussian product-kernel density estimator."""

    def __init__(self, bandwidth=None, cv: Optional[CvConfig] = None):
        self.bandwidth = bandwidth
        self.cv = cv

    def fit(self, X, y=None):
        X = _as_2d(X)
        if X.shape[0] < 1:
            raise ValueError("need at least one point")
        if self.bandwidth is None:
            h = reference_bandwidth(X)
        elif isinstance(self.bandwidth, str) and self.bandwidth == "cv":
            h = cv_bandwidth(X, None, self.cv or CvConfig())
        else:
            h = self.bandwidth
        self.bandwidth_ = _check_bandwidths(h, X.shape[1])
        self.points_ = X
        return self

    @property
    def m(self) -> int:
        return self.points_.shape[0]

    def score_samples(self, Q) -> np.ndarray:
        """Log-density at each query row."""
        check_is_fitted(self, "points_")
        Q = _as_2d(Q)
        if Q.shape[1] != self.points_.shape[1]:
            raise ValueError(
                f"query dimension {Q.shape[1]} != model dimension {self.points_.shape[1]}"
            )
        L = log_kernel_matrix(Q, self.points_, self.bandwidth_)
        return logsumexp(L, axis=1) - np.log(self.m)

    def density(self, Q) -> np.ndarray:
        return np.exp(self.score_samples(Q))


class NadarayaWatson(RegressorMixin, BaseEstimator):
    """Local-constant kernel regression with product Gaussian weights.

    ``y`` may be a matrix; every column is smoothed with the same weights.
    """

    def __init__(self, bandwidth=None, cv: Optional[CvConfig] = None):
        self.bandwidth = bandwidth
        self.cv = cv

    def fit(self, X, y):
        X = _as_2d(X)
        y = np.asarray(y, dtype=float)
        if X.shape[0] < 1:
            raise ValueError("empty training set")
        if y.shape[0] != X.shape[0]:
            raise ValueError("inputs and targets differ in length")
        if self.bandwidth is None:
            h = reference_bandwidth(X)
        elif isinstance(self.bandwidth, str) and self.bandwidth == "cv":
            h = cv_bandwidth(X, y, self.cv or CvConfig())
        else:
            h = self.bandwidth
        self.bandwidth_ = _check_bandwidths(h, X.shape[1])
        self.inputs_ = X
        self.targets_ = y
        return self

    def predict(self, Q) -> np.ndarray:
        check_is_fitted(self, "inputs_")
        Q = _as_2d(Q)
        if Q.shape[1] != self.inputs_.shape[1]:
            raise ValueError(
                f"query dimension {Q.shape[1]} != model dimension {self.inputs_.shape[1]}"
            )
        L = log_kernel_matrix(Q, self.inputs_, self.bandwidth_)
        W = _normalized_weights(L)
        out = W @ self.targets_
        return out


def _normalized_weights(L: np.ndarray) -> np.ndarray:
    top = L.max(axis=1, keepdims=True)
    W = np.exp(L - top)
    W /= W.sum(axis=1, keepdims=True)
    # total kernel mass underflowed: use the nearest training point
    dead = top[:, 0] < UNDERFLOW
    if np.any(dead):
        W[dead] = 0.0
        W[dead, np.argmax(L[dead], axis=1)] = 1.0
    return W


def kde_fit(points, bandwidths) -> KernelDensity:
    return KernelDensity(bandwidth=bandwidths).fit(points)


def kde_eval(model: KernelDensity, q) -> float:
    return float(model.density(np.atleast_2d(np.asarray(q, dtype=float)))[0])


def nw_fit(inputs, targets, bandwidths) -> NadarayaWatson:
    return NadarayaWatson(bandwidth=bandwidths).fit(inputs, targets)


def nw_eval(model: NadarayaWatson, q) -> float:
    return float(model.predict(np.atleast_2d(np.asarray(q, dtype=float)))[0])


def _fold_ids(m: int, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ids = np.arange(m) % folds
    rng.shuffle(ids)
    return ids


def _nw_cv_loss(X, y, h, ids, folds) -> float:
    sse = 0.0
    for k in range(folds):
        test = ids == k
        L = log_kernel_matrix(X[test], X[~test], h)
        pred = _normalized_weights(L) @ y[~test]
        sse += float(np.sum((y[test] - pred) ** 2))
    return sse / X.shape[0]


def _kde_cv_loss(X, h, ids, folds, loss) -> float:
    total = 0.0
    for k in range(folds):
        test = ids == k
        train = X[~test]
        m = train.shape[0]
        held = logsumexp(log_kernel_matrix(X[test], train, h), axis=1) - np.log(m)
        if loss == "loglik":
            total -= float(np.sum(held))
        else:
            # integral of the squared product-Gaussian estimate, closed form
            sq = logsumexp(log_kernel_matrix(train, train, np.sqrt(2.0) * h)) - 2 * np.log(m)
            total += (np.exp(sq) - 2.0 * float(np.mean(np.exp(held)))) * test.sum()
    return total / X.shape[0]


def cv_bandwidth(X, y=None, cfg: CvConfig = CvConfig()) -> np.ndarray:
    """Choose per-dimension bandwidths as grid multiples of the reference rule.

    With ``y`` given (a vector or a matrix of several targets), minimizes
    held-out squared prediction error of Nadaraya-Watson; otherwise
    minimizes the density criterion in ``cfg.density_loss``. Multipliers
    are tuned one coordinate at a time.
    """
    X = _as_2d(X)
    m, d = X.shape
    if cfg.folds > m:
        raise ValueError(f"folds={cfg.folds} exceeds sample size {m}")
    grid = np.asarray(cfg.grid, dtype=float)
    if grid.size == 0:
        raise ValueError("bandwidth grid is empty")
    ref = reference_bandwidth(X)
    if grid.size == 1:
        return ref * grid[0]
    ids = _fold_ids(m, cfg.folds, cfg.seed)
    y = None if y is None else np.asarray(y, dtype=float)

    def loss(mult):
        h = ref * mult
        if y is not None:
            return _nw_cv_loss(X, y, h, ids, cfg.folds)
        return _kde_cv_loss(X, h, ids, cfg.folds, cfg.density_loss)

    start = 1.0 if np.any(np.isclose(grid, 1.0)) else grid[len(grid) // 2]
    mult = np.full(d, start)
    cache = {}
    for _ in range(max(1, cfg.sweeps) if d > 1 else 1):
        for j in range(d):
            scores = []
            for g in grid:
                trial = mult.copy()
                trial[j] = g
                key = tuple(trial)
                if key not in cache:
                    cache[key] = loss(trial)
                scores.append(cache[key])
            mult[j] = grid[int(np.argmin(scores))]
    return ref * mult


class SplineRegression(RegressorMixin, BaseEstimator):
    """Additive penalized cubic regression splines.

    Columns with more than two distinct values get a cubic B-spline basis
    with ``n_knots`` quantile knots (linear beyond the boundary); two-valued
    columns enter linearly. The ridge penalty is chosen by k-fold CV when
    ``alpha="cv"``.
    """

    def __init__(self, n_knots: int = 5, alpha="cv", cv: Optional[CvConfig] = None,
                 alphas: Sequence[float] = PENALTY_GRID):
        self.n_knots = n_knots
        self.alpha = alpha
        self.cv = cv
        self.alphas = alphas

    def _design(self, X):
        parts = []
        for j, tr in enumerate(self.transformers_):
            col = X[:, [j]]
            parts.append(col if tr is None else tr.transform(col))
        return np.hstack(parts) if parts else np.zeros((X.shape[0], 0))

    def fit(self, X, y):
        X = _as_2d(X)
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0]:
            raise ValueError("inputs and targets differ in length")
        self.transformers_ = []
        for j in range(X.shape[1]):
            if len(np.unique(X[:, j])) <= 2:
                self.transformers_.append(None)
            else:
                tr = SplineTransformer(n_knots=self.n_knots, degree=3, knots="quantile",
                                       extrapolation="linear", include_bias=False)
                self.transformers_.append(tr.fit(X[:, [j]]))
        F = self._design(X)
        if isinstance(self.alpha, str) and self.alpha == "cv":
            alpha = self._cv_alpha(F, y, self.cv or CvConfig())
        else:
            alpha = float(self.alpha)
        self.alpha_ = alpha
        self.ridge_ = Ridge(alpha=alpha).fit(F, y)
        return self

    def _cv_alpha(self, F, y, cfg: CvConfig) -> float:
        m = F.shape[0]
        folds = min(cfg.folds, m)
        ids = _fold_ids(m, folds, cfg.seed)
        best, best_loss = None, np.inf
        for alpha in self.alphas:
            loss = 0.0
            for k in range(folds):
                test = ids == k
                if test.all() or not test.any():
                    continue
                pred = Ridge(alpha=alpha).fit(F[~test], y[~test]).predict(F[test])
                loss += float(np.sum((y[test] - pred) ** 2))
            if loss < best_loss:
                best, best_loss = alpha, loss
        return float(best)

    def predict(self, Q) -> np.ndarray:
        check_is_fitted(self, "ridge_")
        return self.ridge_.predict(self._design(_as_2d(Q)))
