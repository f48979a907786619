"""Series solution of the odds integral equation with a compactness constraint.

For every incomplete pattern ``r`` and arm ``a`` the odds
``xi_ra(x) = P(R=r | a, x) / P(R=1_p | a, x)`` is approximated by Hermite
functions ``exp(-x'x) x^lambda`` of standardized covariates. The coefficients
minimize the squared mismatch between the kernel estimate of
``f(X_obs, Y, R=r | A=a)`` and its series representation, subject to
``beta' Lambda beta <= B``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .data import Dataset, Pattern, index_patterns
from .smoothers import CvConfig, KernelDensity, NadarayaWatson, cv_bandwidth

RIDGE = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mu: np.ndarray
    sigma_inv_sqrt: np.ndarray
    ridged: bool = False

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.mu) @ self.sigma_inv_sqrt


def fit_standardizer(X) -> Standardizer:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m, p = X.shape
    if m < p + 1:
        raise ValueError(f"need at least {p + 1} complete cases to standardize, got {m}")
    mu = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    ridged = False
    if vals.min() <= 1e-12 * max(vals.max(), 1e-300):
        cov = cov + 1e-8 * np.trace(cov) / p * np.eye(p)
        vals, vecs = np.linalg.eigh(cov)
        ridged = True
        if vals.min() <= 0:
            raise ValueError("covariance of complete cases is singular")
    inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
    return Standardizer(mu=mu, sigma_inv_sqrt=(inv_sqrt + inv_sqrt.T) / 2, ridged=ridged)


def standardize(s: Standardizer, x) -> np.ndarray:
    return s.transform(x)


@dataclass(frozen=True)
class HermiteBasis:
    J: int
    multi_indices: Tuple[Tuple[int, ...], ...]

    @property
    def p(self) -> int:
        return len(self.multi_indices[0])

    def __call__(self, xt) -> np.ndarray:
        return basis_eval(self, xt)


def build_basis(J: int, p: int) -> HermiteBasis:
    """First ``J`` multi-indices in graded order.

    Within a total degree, indices with larger powers of earlier coordinates
    come first, e.g. ``(0,0), (1,0), (0,1), (2,0), (1,1), (0,2)`` for p=2.
    """
    if J < 1 or p < 1:
        raise ValueError("J and p must be positive")
    out: List[Tuple[int, ...]] = []
    deg = 0
    while len(out) < J:
        same = [c for c in itertools.product(range(deg + 1), repeat=p) if sum(c) == deg]
        out.extend(sorted(same, reverse=True))
        deg += 1
    return HermiteBasis(J=J, multi_indices=tuple(out[:J]))


def basis_eval(b: HermiteBasis, xt) -> np.ndarray:
    """``exp(-x'x) prod_l x_l**lambda_jl`` for each row; shape ``(n, J)``."""
    xt = np.asarray(xt, dtype=float)
    single = xt.ndim == 1
    xt = np.atleast_2d(xt)
    lam = np.asarray(b.multi_indices)
    env = np.exp(-np.sum(xt * xt, axis=1))
    mono = np.prod(xt[:, None, :] ** lam[None, :, :], axis=2)
    out = env[:, None] * mono
    return out[0] if single else out


@dataclass(frozen=True)
class RegularizerMatrix:
    lam: np.ndarray
    order: int
    delta0: float
    rule: str


def default_delta0(p: int) -> int:
    return math.ceil(p / 2) + 1


def _derivative_poly(power: int, k: int) -> np.ndarray:
    """Coefficients of ``q`` with ``d^k/dx^k [exp(-x^2) x^power] = exp(-x^2) q(x)``."""
    poly = np.zeros(power + 1)
    poly[power] = 1.0
    for _ in range(k):
        poly = P.polysub(P.polyder(poly), 2.0 * P.polymulx(poly))
    return poly


def _lambda_on_nodes(b: HermiteBasis, order: int, delta0: float, nodes, weights) -> np.ndarray:
    """Assemble the regularizer from ``integral g(x) exp(-2x'x) dx ~ sum w g(x)``."""
    J, p = b.J, b.p
    tail = (1.0 + np.sum(nodes * nodes, axis=1)) ** delta0
    lam = np.zeros((J, J))
    for kappa in itertools.product(range(order + 1), repeat=p):
        if sum(kappa) > order:
            continue
        vals = np.ones((nodes.shape[0], J))
        for j, idx in enumerate(b.multi_indices):
            for l in range(p):
                vals[:, j] *= P.polyval(nodes[:, l], _derivative_poly(idx[l], kappa[l]))
        lam += (vals * (weights * tail)[:, None]).T @ vals
    return (lam + lam.T) / 2


def _gauss_hermite_nodes(p: int, n_nodes: int):
    u, w = np.polynomial.hermite.hermgauss(n_nodes)
    # x = u/sqrt(2) turns the Hermite weight exp(-u^2) into exp(-2x^2)
    x1, w1 = u / np.sqrt(2.0), w / np.sqrt(2.0)
    grids = np.meshgrid(*([x1] * p), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(nodes.shape[0])
    for wg in np.meshgrid(*([w1] * p), indexing="ij"):
        weights = weights * wg.ravel()
    return nodes, weights


@lru_cache(maxsize=64)
def _cached_lambda(indices, order, delta0, n_nodes, mc_draws, seed):
    b = HermiteBasis(J=len(indices), multi_indices=indices)
    p = b.p
    if p <= 3:
        for nodes_per_dim in (n_nodes, 2 * n_nodes, 4 * n_nodes):
            nodes, weights = _gauss_hermite_nodes(p, nodes_per_dim)
            lam = _lambda_on_nodes(b, order, delta0, nodes, weights)
            if np.linalg.eigvalsh(lam).min() > 0:
                return lam, f"gauss-hermite-{nodes_per_dim}"
        raise SolverError("regularizer is not positive definite")
    rng = np.random.default_rng(seed)
    # exp(-2x'x) is proportional to the N(0, I/4) density
    nodes = rng.standard_normal((mc_draws, p)) / 2.0
    weights = np.full(mc_draws, (np.pi / 2.0) ** (p / 2.0) / mc_draws)
    lam = _lambda_on_nodes(b, order, delta0, nodes, weights)
    if np.linalg.eigvalsh(lam).min() <= 0:
        raise SolverError("regularizer is not positive definite")
    return lam, f"monte-carlo-{mc_draws}"


def compute_lambda(
    b: HermiteBasis,
    order: int = 2,
    delta0: Optional[float] = None,
    n_nodes: int = 20,
    mc_draws: int = 100_000,
    seed: int = 0,
) -> RegularizerMatrix:
    """Weighted Sobolev Gram matrix of the basis.

    Sums, over derivative multi-indices of total order at most ``order``,
    the integrals of ``D h_i D h_j (1 + x'x)**delta0``. Tensor Gauss-Hermite
    quadrature is used for p <= 3 (exact for integer ``delta0`` at small
    J), Monte Carlo otherwise.
    """
    if delta0 is None:
        delta0 = default_delta0(b.p)
    if delta0 <= b.p / 2:
        raise ValueError(f"delta0 must exceed p/2 = {b.p / 2}")
    lam, rule = _cached_lambda(b.multi_indices, int(order), float(delta0), n_nodes, mc_draws, seed)
    return RegularizerMatrix(lam=lam.copy(), order=order, delta0=delta0, rule=rule)


@dataclass
class LsqResult:
    beta: np.ndarray
    mu: float
    objective: float
    active: bool
    iterations: int


def constrained_lsq(D, y, lam, B: float, rel_tol: float = 1e-8, max_iter: int = 200) -> LsqResult:
    """Minimize ``||y - D beta||^2`` subject to ``beta' lam beta <= B``.

    The multiplier ``mu`` is found by bisection on ``log mu`` using the
    monotone decrease of ``beta(mu)' lam beta(mu)``; the returned point is
    always on the feasible side.
    """
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if B <= 0:
        raise ValueError("bound B must be positive")
    G = D.T @ D
    c = D.T @ y
    J = G.shape[0]

    # generalized eigenproblem G v = s lam v reduces the path to a scalar function
    L = np.linalg.cholesky(lam)
    Linv = np.linalg.inv(L)
    Gt = Linv @ G @ Linv.T
    s, V = np.linalg.eigh((Gt + Gt.T) / 2)
    s = np.maximum(s, 0.0)
    ct = V.T @ (Linv @ c)
    back = Linv.T @ V

    def beta_at(mu):
        return back @ (ct / (s + mu))

    def size_at(mu):
        return float(np.sum((ct / (s + mu)) ** 2))

    def objective(beta):
        return float(np.sum((y - D @ beta) ** 2))

    scale = max(float(np.trace(G)) / J, 1e-300)
    if np.min(s) > RIDGE * max(s.max(), 1e-300):
        beta0 = np.linalg.solve(G, c)
    else:
        beta0 = np.linalg.solve(G + RIDGE * scale * np.eye(J), c)
    if float(beta0 @ lam @ beta0) <= B:
        return LsqResult(beta0, 0.0, objective(beta0), False, 0)

    lo, hi = 0.0, max(scale, 1e-12)
    it = 0
    while size_at(hi) > B:
        lo, hi = hi, hi * 4.0
        it += 1
        if it > max_iter:
            raise SolverError(f"could not bracket the multiplier (hi={hi:g})")
    # bisection in log space once a positive lower end is known
    while it < max_iter:
        it += 1
        mid = math.sqrt(lo * hi) if lo > 0 else hi / 2.0
        if size_at(mid) > B:
            lo = mid
        else:
            hi = mid
        if abs(size_at(hi) - B) <= rel_tol * B * 1e-3 or (lo > 0 and hi / lo - 1 < 1e-15):
            break
    beta = beta_at(hi)
    return LsqResult(beta, hi, objective(beta), True, it)


def kkt_residual(D, y, lam, B, res: LsqResult) -> Tuple[float, float]:
    """Stationarity and complementary-slackness residuals of a solution."""
    D = np.asarray(D)
    grad = D.T @ (D @ res.beta - y) + res.mu * lam @ res.beta
    slack = res.mu * (res.beta @ lam @ res.beta - B)
    return float(np.linalg.norm(grad)), float(abs(slack))


def _slice_inputs(d: Dataset, rows: np.ndarray, obs_idx: Sequence[int]) -> np.ndarray:
    return np.column_stack([d.x[np.ix_(rows, list(obs_idx))], d.y[rows]])


def _resolve(key, bandwidths, X, y, cv):
    if bandwidths is not None and key in bandwidths:
        return np.asarray(bandwidths[key], dtype=float)
    return cv_bandwidth(X, y, cv)


def estimate_H(
    b: HermiteBasis,
    std: Standardizer,
    pat: Pattern,
    a: int,
    d: Dataset,
    eval_rows: Optional[np.ndarray] = None,
    bandwidth=None,
    cv: CvConfig = CvConfig(),
) -> Tuple[np.ndarray, np.ndarray]:
    """Kernel regression of ``h_j(x~)`` on ``(X_obs, Y)`` among complete cases.

    Trained on complete cases with ``A=a`` and evaluated at ``eval_rows``
    (default: every unit in arm ``a`` observing the columns of ``pat``).
    Returns ``(H, bandwidth)`` with ``H`` of shape ``(len(eval_rows), J)``.
    """
    cc = np.flatnonzero(d.complete & (d.a == a))
    if len(cc) == 0:
        raise ValueError(f"no complete cases in arm {a}")
    if eval_rows is None:
        eval_rows = _eval_rows(d, pat, a)
    Xtr = _slice_inputs(d, cc, pat.obs_idx)
    targets = basis_eval(b, std.transform(d.x[cc]))
    if bandwidth is None:
        bandwidth = cv_bandwidth(Xtr, targets, cv)
    nw = NadarayaWatson(bandwidth=bandwidth).fit(Xtr, targets)
    return nw.predict(_slice_inputs(d, eval_rows, pat.obs_idx)), nw.bandwidth_


def _eval_rows(d: Dataset, pat: Pattern, a: int) -> np.ndarray:
    sees = np.all(d.r[:, list(pat.obs_idx)] == 1, axis=1) if pat.obs_idx else np.ones(d.n, bool)
    return np.flatnonzero((d.a == a) & sees)


@dataclass
class XiModel:
    standardizer: Optional[Standardizer]
    basis: HermiteBasis
    lam: RegularizerMatrix
    B: float
    coefs: Dict[Tuple[Pattern, int], np.ndarray] = field(default_factory=dict)
    diagnostics: Dict[Tuple[Pattern, int], dict] = field(default_factory=dict)
    bandwidths: Dict[tuple, np.ndarray] = field(default_factory=dict)

    def patterns(self, a: int) -> List[Pattern]:
        return [pat for (pat, arm) in self.coefs if arm == a]

    def xi(self, pat: Pattern, a: int, x) -> np.ndarray:
        xt = self.standardizer.transform(np.atleast_2d(x))
        return basis_eval(self.basis, xt) @ self.coefs[(pat, a)]

    def to_dict(self) -> dict:
        return {
            "J": self.basis.J,
            "multi_indices": [list(m) for m in self.basis.multi_indices],
            "B": self.B,
            "lambda": self.lam.lam.tolist(),
            "standardizer": None
            if self.standardizer is None
            else {
                "mu": self.standardizer.mu.tolist(),
                "sigma_inv_sqrt": self.standardizer.sigma_inv_sqrt.tolist(),
            },
            "coefficients": {
                f"{pat.label()}|a={a}": beta.tolist() for (pat, a), beta in self.coefs.items()
            },
            "diagnostics": {
                f"{pat.label()}|a={a}": diag for (pat, a), diag in self.diagnostics.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _slice_density(d, rows, obs_idx, key, bandwidths, cv, eval_inputs):
    X = _slice_inputs(d, rows, obs_idx)
    h = _resolve(key, bandwidths, X, None, cv)
    kde = KernelDensity(bandwidth=h).fit(X)
    return kde.density(eval_inputs), kde.bandwidth_


def fit_xi_arm(
    d: Dataset,
    a: int,
    model: XiModel,
    cv: CvConfig = CvConfig(),
    bandwidths: Optional[dict] = None,
) -> XiModel:
    """Fit the odds series of every incomplete pattern in arm ``a`` into ``model``."""
    idx = index_patterns(d)
    arm = d.a == a
    n_a = int(arm.sum())
    cc = np.flatnonzero(d.complete & arm)
    if len(cc) == 0:
        raise ValueError(f"no complete cases in arm {a}")
    for pat in idx.incomplete_patterns():
        rows_r = np.intersect1d(idx.members(pat), np.flatnonzero(arm))
        ev = _eval_rows(d, pat, a)
        ev_inputs = _slice_inputs(d, ev, pat.obs_idx)
        if len(rows_r) == 0:
            target = np.zeros(len(ev))
        else:
            dens, h_t = _slice_density(
                d, rows_r, pat.obs_idx, ("target", pat, a), bandwidths, cv, ev_inputs
            )
            model.bandwidths[("target", pat, a)] = h_t
            target = len(rows_r) / n_a * dens
        dens_cc, h_c = _slice_density(
            d, cc, pat.obs_idx, ("complete", pat, a), bandwidths, cv, ev_inputs
        )
        model.bandwidths[("complete", pat, a)] = h_c
        f_cc = len(cc) / n_a * dens_cc
        h_key = ("H", pat, a)
        H, h_h = estimate_H(
            model.basis,
            model.standardizer,
            pat,
            a,
            d,
            eval_rows=ev,
            bandwidth=None if bandwidths is None else bandwidths.get(h_key),
            cv=cv,
        )
        model.bandwidths[h_key] = h_h
        design = H * f_cc[:, None]
        res = constrained_lsq(design, target, model.lam.lam, model.B)
        model.coefs[(pat, a)] = res.beta
        model.diagnostics[(pat, a)] = {
            "objective": res.objective,
            "active": res.active,
            "multiplier": res.mu,
            "units": int(len(ev)),
        }
    return model


def fit_xi(
    d: Dataset,
    J: int = 5,
    B: float = 50.0,
    cv: CvConfig = CvConfig(),
    bandwidths: Optional[dict] = None,
    order: int = 2,
    delta0: Optional[float] = None,
    arms: Sequence[int] = (0, 1),
) -> XiModel:
    """Fit the odds series for every (incomplete pattern, arm) pair.

    ``bandwidths`` freezes smoothing parameters from an earlier fit (keys as
    in :attr:`XiModel.bandwidths`); missing keys are selected by CV.
    """
    basis = build_basis(J, d.p)
    lam = compute_lambda(basis, order=order, delta0=delta0)
    complete = d.complete
    std = fit_standardizer(d.x[complete]) if np.any(~complete) else None
    model = XiModel(standardizer=std, basis=basis, lam=lam, B=B)
    if std is None:
        return model
    for a in arms:
        fit_xi_arm(d, a, model, cv=cv, bandwidths=bandwidths)
    return model


def response_prob(model: XiModel, x, a: int, clip: float = 0.01, counter: Optional[dict] = None):
    """``{1 + sum_r xi_ra(x)}^-1`` with odds floored at 0, clipped to ``[clip, 1]``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    total = np.zeros(x.shape[0])
    for pat in model.patterns(a):
        total += np.maximum(model.xi(pat, a, x), 0.0)
    prob = 1.0 / (1.0 + total)
    low = prob < clip
    if counter is not None:
        counter["clipped"] = counter.get("clipped", 0) + int(low.sum())
    return np.where(low, clip, prob)
