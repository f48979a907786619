"""Parametric maximum likelihood by fractional imputation.

The complete-data density factorizes as

    P(R | A, X; eta) f(Y | A, X; beta_A) P(A | X; alpha) prod_j f(X_j | X_<j; lambda_j)

with a multinomial logit for the pattern (reference: complete pattern),
Gaussian linear outcomes per arm, a logistic treatment model and a
triangular covariate model (Gaussian linear or Bernoulli logistic in the
preceding columns).

Each incomplete unit receives ``M`` draws of its missing covariates from the
covariate model at the starting value. Draws stay fixed and only their
importance weights change, so the fractional score equation is the
stationarity condition of the importance-sampled observed log-likelihood

    l(theta) = sum_i log( M^-1 sum_j f(Z*_ij; theta) / h(X*_ij) ).

Iterations are EM steps (weighted per-factor MLE), optionally accelerated by
Newton steps on ``l`` that are accepted only when they increase it.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit

from .data import Dataset, Pattern, index_patterns

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def _lse_rows(L: np.ndarray) -> np.ndarray:
    top = L.max(axis=1)
    return top + np.log(np.exp(L - top[:, None]).sum(axis=1))


@dataclass(frozen=True)
class ParamModelSpec:
    families: Tuple[str, ...]
    binary_levels: Tuple[Optional[Tuple[float, float]], ...]
    patterns: Tuple[Pattern, ...]

    @property
    def p(self) -> int:
        return len(self.families)

    @classmethod
    def infer(cls, d: Dataset) -> "ParamModelSpec":
        """Bernoulli for two-valued columns, Gaussian otherwise."""
        fams, levels = [], []
        for j in range(d.p):
            vals = np.unique(d.x[d.r[:, j] == 1, j])
            if len(vals) == 2:
                fams.append("bernoulli")
                levels.append((float(vals[0]), float(vals[1])))
            else:
                fams.append("gaussian")
                levels.append(None)
        idx = index_patterns(d)
        pats = tuple([idx.complete] + idx.incomplete_patterns())
        return cls(families=tuple(fams), binary_levels=tuple(levels), patterns=pats)

    def check(self, d: Dataset) -> None:
        if self.p != d.p:
            raise ValueError(f"model has {self.p} covariate columns, data has {d.p}")
        known = {pat.bits for pat in self.patterns}
        seen = {tuple(row) for row in d.r.tolist()}
        if not seen <= known:
            raise ValueError(f"data contain patterns not in the model: {sorted(seen - known)}")
        if not self.patterns[0].is_complete:
            raise ValueError("first pattern must be the complete pattern")


@dataclass
class ParamTheta:
    alpha: np.ndarray
    beta: List[np.ndarray]
    sigma2: np.ndarray
    eta: np.ndarray
    lam: List[np.ndarray]
    lam_sigma2: np.ndarray

    @property
    def beta0(self):
        return self.beta[0]

    @property
    def beta1(self):
        return self.beta[1]

    def flat(self) -> np.ndarray:
        parts = [self.alpha, self.beta[0], self.beta[1], self.sigma2, self.eta.ravel()]
        parts += list(self.lam) + [self.lam_sigma2]
        return np.concatenate([np.ravel(p) for p in parts])

    def copy(self) -> "ParamTheta":
        return ParamTheta(
            alpha=self.alpha.copy(),
            beta=[b.copy() for b in self.beta],
            sigma2=self.sigma2.copy(),
            eta=self.eta.copy(),
            lam=[l.copy() for l in self.lam],
            lam_sigma2=self.lam_sigma2.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta0": self.beta[0].tolist(),
            "beta1": self.beta[1].tolist(),
            "sigma2": self.sigma2.tolist(),
            "eta": self.eta.tolist(),
            "lambda": [l.tolist() for l in self.lam],
            "lambda_sigma2": self.lam_sigma2.tolist(),
        }


@dataclass
class Stacked:
    """Fractional observations.

    Rows of the incomplete units come first, one contiguous segment per
    unit, followed by one row per complete unit. Identical draws within a
    unit may share a row whose ``mult`` counts them, so a segment holds at
    most ``M`` rows. ``inc_units`` and ``cc_units`` are dataset row indices
    and ``counts`` gives each unit's multiplicity (incomplete units first),
    which lets a bootstrap resample reuse rows instead of copying them.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    pattern: np.ndarray
    log_h: np.ndarray
    inc_units: np.ndarray
    cc_units: np.ndarray
    M: int
    counts: Optional[np.ndarray] = None
    mult: Optional[np.ndarray] = None
    seg_len: Optional[np.ndarray] = None

    def __post_init__(self):
        n_inc, n_cc = len(self.inc_units), len(self.cc_units)
        if self.seg_len is None:
            self.seg_len = np.full(n_inc, self.M, dtype=np.intp)
        if self.counts is None:
            self.counts = np.ones(n_inc + n_cc)
        if self.mult is None:
            self.mult = np.ones(len(self.y))
        self.n_inc_rows = int(self.seg_len.sum())
        if len(self.y) != self.n_inc_rows + n_cc:
            raise ValueError("row count does not match the unit layout")
        self.D = np.column_stack([np.ones(len(self.y)), self.x])
        self.Z = np.column_stack([np.ones(len(self.y)), self.a, self.x])
        self.seg_start = np.concatenate([[0], np.cumsum(self.seg_len)[:-1]]).astype(np.intp)
        self.seg_of_row = np.repeat(np.arange(n_inc), self.seg_len)
        self.complete_rows = self.n_inc_rows + np.arange(n_cc)
        self.row_counts = np.concatenate(
            [np.repeat(self.counts[:n_inc], self.seg_len), self.counts[n_inc:]]
        )

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    @property
    def has_missing(self) -> bool:
        return len(self.inc_units) > 0

    @property
    def units(self) -> np.ndarray:
        return np.concatenate([self.inc_units, self.cc_units])

    def expand(self, values) -> np.ndarray:
        """Per-draw values for the incomplete units, shape ``(n_inc, M, ...)``."""
        values = np.asarray(values)[: self.n_inc_rows]
        reps = self.mult[: self.n_inc_rows].astype(np.intp)
        return np.repeat(values, reps, axis=0).reshape((len(self.inc_units), self.M) + values.shape[1:])

    def segment_sum(self, values) -> np.ndarray:
        """Sum of per-row values over each incomplete unit's segment."""
        return np.add.reduceat(values[: self.n_inc_rows], self.seg_start, axis=0)

    def subset(self, idx) -> "Stacked":
        """Resample of dataset units ``idx`` (repeats allowed), draws reused."""
        idx = np.asarray(idx, dtype=np.intp)
        units = self.units
        pos = np.full(units.max() + 1 if units.size else 0, -1, dtype=np.intp)
        pos[units] = np.arange(len(units))
        if np.any(idx > len(pos) - 1) or np.any(pos[idx] < 0):
            raise IndexError("resample refers to units absent from this stack")
        mult = np.bincount(pos[idx], minlength=len(units)) * self.counts
        n_inc = len(self.inc_units)
        keep_inc = np.flatnonzero(mult[:n_inc] > 0)
        keep_cc = np.flatnonzero(mult[n_inc:] > 0)
        lens = self.seg_len[keep_inc]
        new_start = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.intp)
        inc_rows = np.repeat(self.seg_start[keep_inc] - new_start, lens) + np.arange(lens.sum())
        rows = np.concatenate([inc_rows, self.n_inc_rows + keep_cc]).astype(np.intp)
        return Stacked(
            x=self.x[rows],
            a=self.a[rows],
            y=self.y[rows],
            pattern=self.pattern[rows],
            log_h=self.log_h[rows],
            inc_units=self.inc_units[keep_inc],
            cc_units=self.cc_units[keep_cc],
            M=self.M,
            counts=np.concatenate([mult[:n_inc][keep_inc], mult[n_inc:][keep_cc]]).astype(float),
            mult=self.mult[rows],
            seg_len=lens,
        )


# factors ------------------------------------------------------------------


class _Logistic:
    kind = "logistic"

    def __init__(self, name, cols, target):
        self.name, self.cols, self.target = name, cols, target

    def ll(self, v, st):
        lin = st.D[:, : self.cols] @ v
        t = self.target(st)
        return t * log_expit(lin) + (1 - t) * log_expit(-lin)

    def score(self, v, st):
        D = st.D[:, : self.cols]
        return D * (self.target(st) - expit(D @ v))[:, None]

    def hessian(self, v, st, w):
        D = st.D[:, : self.cols]
        s = expit(D @ v)
        return -(D * (w * s * (1 - s))[:, None]).T @ D

    def mstep(self, v, st, w):
        return _newton_logistic(st.D[:, : self.cols], self.target(st), w, v)

    def terms(self, v, st):
        D = st.D[:, : self.cols]
        lin = D @ v
        t = self.target(st)
        s = expit(lin)
        ll = t * log_expit(lin) + (1 - t) * log_expit(-lin)
        return ll, D * (t - s)[:, None], lambda w: -(D * (w * s * (1 - s))[:, None]).T @ D


class _Gauss:
    """Gaussian linear factor; internal parameters ``(coef, log variance)``."""

    kind = "gauss"

    def __init__(self, name, cols, target, arm=None):
        self.name, self.cols, self.target, self.arm = name, cols, target, arm

    def _mask(self, st):
        return np.ones(len(st.y), bool) if self.arm is None else st.a == self.arm

    def ll(self, v, st):
        m = self._mask(st)
        out = np.zeros(len(st.y))
        res = self.target(st)[m] - st.D[m, : self.cols] @ v[:-1]
        out[m] = -0.5 * (LOG_2PI + v[-1] + res * res * np.exp(-v[-1]))
        return out

    def score(self, v, st):
        m = self._mask(st)
        out = np.zeros((len(st.y), self.cols + 1))
        D = st.D[m, : self.cols]
        res = self.target(st)[m] - D @ v[:-1]
        iv = np.exp(-v[-1])
        out[m, :-1] = D * (res * iv)[:, None]
        out[m, -1] = -0.5 + 0.5 * res * res * iv
        return out

    def hessian(self, v, st, w):
        m = self._mask(st)
        D = st.D[m, : self.cols]
        wm = w[m]
        res = self.target(st)[m] - D @ v[:-1]
        iv = np.exp(-v[-1])
        k = self.cols
        H = np.empty((k + 1, k + 1))
        H[:k, :k] = -(D * wm[:, None]).T @ D * iv
        H[:k, k] = H[k, :k] = -(D.T @ (wm * res)) * iv
        H[k, k] = -0.5 * np.sum(wm * res * res) * iv
        return H

    def mstep(self, v, st, w):
        m = self._mask(st)
        D = st.D[m, : self.cols]
        coef, s2 = _weighted_ls(D, self.target(st)[m], w[m])
        return np.concatenate([coef, [np.log(s2)]])

    def terms(self, v, st):
        m = self._mask(st)
        N, k = len(st.y), self.cols
        D = st.D[m, :k]
        res = self.target(st)[m] - D @ v[:-1]
        iv = np.exp(-v[-1])
        ll = np.zeros(N)
        ll[m] = -0.5 * (LOG_2PI + v[-1] + res * res * iv)
        S = np.zeros((N, k + 1))
        S[m, :-1] = D * (res * iv)[:, None]
        S[m, -1] = -0.5 + 0.5 * res * res * iv

        def hess(w):
            wm = w[m]
            H = np.empty((k + 1, k + 1))
            H[:k, :k] = -(D * wm[:, None]).T @ D * iv
            H[:k, k] = H[k, :k] = -(D.T @ (wm * res)) * iv
            H[k, k] = -0.5 * np.sum(wm * res * res) * iv
            return H

        return ll, S, hess


class _Multinomial:
    kind = "multinomial"
    name = "eta"

    def __init__(self, n_cat, q):
        self.m, self.q = n_cat - 1, q

    def _probs(self, v, st):
        logits = np.column_stack([np.zeros(len(st.y)), st.Z @ v.reshape(self.m, self.q).T])
        norm = _lse_rows(logits)
        return logits, norm

    def ll(self, v, st):
        logits, norm = self._probs(v, st)
        return logits[np.arange(len(st.y)), st.pattern] - norm

    def score(self, v, st):
        logits, norm = self._probs(v, st)
        P = np.exp(logits[:, 1:] - norm[:, None])
        Y = np.zeros_like(P)
        hit = st.pattern > 0
        Y[np.flatnonzero(hit), st.pattern[hit] - 1] = 1.0
        R = Y - P
        return (R[:, :, None] * st.Z[:, None, :]).reshape(len(st.y), -1)

    def hessian(self, v, st, w):
        logits, norm = self._probs(v, st)
        P = np.exp(logits[:, 1:] - norm[:, None])
        return _multinomial_hessian(st.Z, P, w, self.m, self.q)

    def mstep(self, v, st, w):
        return _newton_multinomial(st.Z, st.pattern, w, v.reshape(self.m, self.q)).ravel()

    def terms(self, v, st):
        N = len(st.y)
        logits, norm = self._probs(v, st)
        ll = logits[np.arange(N), st.pattern] - norm
        P = np.exp(logits[:, 1:] - norm[:, None])
        R = -P
        hit = st.pattern > 0
        R[np.flatnonzero(hit), st.pattern[hit] - 1] += 1.0
        S = (R[:, :, None] * st.Z[:, None, :]).reshape(N, -1)
        return ll, S, lambda w: _multinomial_hessian(st.Z, P, w, self.m, self.q)


def _multinomial_hessian(Z, P, w, m, q):
    H = np.zeros((m * q, m * q))
    for c in range(m):
        for e in range(c, m):
            coef = w * P[:, c] * ((c == e) - P[:, e])
            blk = -(Z * coef[:, None]).T @ Z
            H[c * q:(c + 1) * q, e * q:(e + 1) * q] = blk
            H[e * q:(e + 1) * q, c * q:(c + 1) * q] = blk.T
    return H


def _newton_logistic(X, t, w, beta, tol=1e-10, max_iter=100):
    """Maximize ``sum w [t log s + (1-t) log(1-s)]`` with ``s = expit(X beta)``."""

    def objective(b):
        lin = X @ b
        return float(np.sum(w * (t * log_expit(lin) + (1 - t) * log_expit(-lin))))

    beta = np.asarray(beta, dtype=float).copy()
    obj = objective(beta)
    for _ in range(max_iter):
        s = expit(X @ beta)
        grad = X.T @ (w * (t - s))
        H = (X * (w * s * (1 - s))[:, None]).T @ X
        step = _solve_pd(H, grad)
        scale = 1.0
        while True:
            cand = beta + scale * step
            new = objective(cand)
            if new >= obj - 1e-13 * max(1.0, abs(obj)) or scale < 1e-8:
                break
            scale /= 2
        beta, obj = cand, new
        if np.max(np.abs(scale * step)) < tol:
            break
    return beta


def _newton_multinomial(Z, k, w, eta, tol=1e-10, max_iter=100):
    """Weighted multinomial logit with category 0 as reference."""
    m, q = eta.shape
    n = len(k)
    Y = np.zeros((n, m))
    hit = k > 0
    Y[np.flatnonzero(hit), k[hit] - 1] = 1.0

    def parts(e):
        logits = np.column_stack([np.zeros(n), Z @ e.T])
        norm = _lse_rows(logits)
        return logits, norm

    def objective(e):
        logits, norm = parts(e)
        return float(np.sum(w * (logits[np.arange(n), k] - norm)))

    eta = eta.copy()
    obj = objective(eta)
    for _ in range(max_iter):
        logits, norm = parts(eta)
        P = np.exp(logits[:, 1:] - norm[:, None])
        grad = ((Y - P) * w[:, None]).T @ Z
        H = -_multinomial_hessian(Z, P, w, m, q)
        step = _solve_pd(H, grad.ravel()).reshape(m, q)
        scale = 1.0
        while True:
            cand = eta + scale * step
            new = objective(cand)
            if new >= obj - 1e-13 * max(1.0, abs(obj)) or scale < 1e-8:
                break
            scale /= 2
        eta, obj = cand, new
        if np.max(np.abs(scale * step)) < tol:
            break
    return eta


def _solve_pd(H, g):
    try:
        return np.linalg.solve(H + 1e-12 * np.trace(H) / len(g) * np.eye(len(g)), g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def _weighted_ls(D, target, w):
    Dw = D * w[:, None]
    coef = np.linalg.solve(Dw.T @ D, Dw.T @ target)
    res = target - D @ coef
    return coef, float(np.sum(w * res * res) / np.sum(w))


class _Model:
    """Factor list for a spec plus the mapping to and from :class:`ParamTheta`."""

    def __init__(self, spec: ParamModelSpec, ever_missing: np.ndarray):
        self.spec = spec
        p = spec.p
        self.factors = [_Logistic("alpha", p + 1, lambda st: st.a.astype(float))]
        self.factors += [
            _Gauss(f"beta{arm}", p + 1, lambda st: st.y, arm=arm) for arm in (0, 1)
        ]
        if len(spec.patterns) > 1:
            self.factors.append(_Multinomial(len(spec.patterns), p + 2))
        self.fixed = []
        for j in range(p):
            target = self._column_target(j)
            fac = (
                _Gauss(f"lambda{j}", j + 1, target)
                if spec.families[j] == "gaussian"
                else _Logistic(f"lambda{j}", j + 1, target)
            )
            fac.column = j
            # columns 0..j always observed: factor is free of imputations
            (self.fixed if not np.any(ever_missing[: j + 1]) else self.factors).append(fac)

    def _column_target(self, j):
        spec = self.spec
        if spec.families[j] == "gaussian":
            return lambda st: st.x[:, j]
        lo, hi = spec.binary_levels[j]
        return lambda st: (st.x[:, j] - lo) / (hi - lo)

    def get(self, theta: ParamTheta, fac) -> np.ndarray:
        name = fac.name
        if name == "alpha":
            return theta.alpha.copy()
        if name.startswith("beta"):
            arm = int(name[-1])
            return np.concatenate([theta.beta[arm], [np.log(theta.sigma2[arm])]])
        if name == "eta":
            return theta.eta.ravel().copy()
        j = fac.column
        if self.spec.families[j] == "gaussian":
            return np.concatenate([theta.lam[j], [np.log(theta.lam_sigma2[j])]])
        return theta.lam[j].copy()

    def put(self, theta: ParamTheta, fac, v) -> None:
        name = fac.name
        if name == "alpha":
            theta.alpha = v.copy()
        elif name.startswith("beta"):
            arm = int(name[-1])
            theta.beta[arm] = v[:-1].copy()
            theta.sigma2[arm] = np.exp(v[-1])
        elif name == "eta":
            theta.eta = v.reshape(theta.eta.shape).copy()
        else:
            j = fac.column
            if self.spec.families[j] == "gaussian":
                theta.lam[j] = v[:-1].copy()
                theta.lam_sigma2[j] = np.exp(v[-1])
            else:
                theta.lam[j] = v.copy()

    def vector(self, theta):
        return np.concatenate([self.get(theta, f) for f in self.factors])

    def from_vector(self, theta, vec) -> ParamTheta:
        out = theta.copy()
        k = 0
        for f in self.factors:
            size = len(self.get(theta, f))
            self.put(out, f, vec[k:k + size])
            k += size
        return out

    def fixed_ll(self, theta, st):
        out = np.zeros(len(st.y))
        for f in self.fixed:
            out += f.ll(self.get(theta, f), st)
        return out

    def free_ll(self, theta, st):
        out = np.zeros(len(st.y))
        for f in self.factors:
            out += f.ll(self.get(theta, f), st)
        return out


def _weights_loglik(lf, st):
    w = np.ones(len(lf))
    cc = st.complete_rows
    ll = float(np.sum(st.row_counts[cc] * lf[cc]))
    if st.has_missing:
        R = st.n_inc_rows
        lw = lf[:R] - st.log_h[:R] + np.log(st.mult[:R])
        top = np.maximum.reduceat(lw, st.seg_start)
        e = np.exp(lw - top[st.seg_of_row])
        total = np.add.reduceat(e, st.seg_start)
        w[:R] = e / total[st.seg_of_row]
        c = st.counts[: len(st.inc_units)]
        ll += float(np.sum(c * (top + np.log(total) - np.log(st.M))))
    return w, ll


def e_step_parts(model: _Model, theta, st, fixed_ll=None):
    lf = model.free_ll(theta, st) + (model.fixed_ll(theta, st) if fixed_ll is None else fixed_ll)
    return _weights_loglik(lf, st)


def e_step(spec, theta, st) -> Tuple[np.ndarray, float]:
    """Fractional weights and the importance-sampled observed log-likelihood."""
    return e_step_parts(_model_for(spec, st), theta, st)


def _model_for(spec, st):
    ever = np.zeros(spec.p, bool)
    for pat in spec.patterns:
        ever[list(pat.mis_idx)] = True
    return _Model(spec, ever)


def m_step(spec, st, w, theta, model=None) -> ParamTheta:
    """Per-factor maximizers of the fractionally weighted log-likelihood."""
    model = model or _model_for(spec, st)
    new = theta.copy()
    wc = w * st.row_counts
    for f in model.factors:
        model.put(new, f, f.mstep(model.get(theta, f), st, wc))
    return new


@dataclass
class _Eval:
    loglik: float
    weights: np.ndarray
    grad: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


def _evaluate(model: _Model, theta, st, fixed, derivs=True) -> _Eval:
    """Log-likelihood, weights and optionally the gradient and Hessian.

    The Hessian is the weighted complete-data Hessian plus the within-unit
    covariance of the row scores (Louis' identity).
    """
    if not derivs:
        w, ll = e_step_parts(model, theta, st, fixed)
        return _Eval(ll, w)
    parts = [f.terms(model.get(theta, f), st) for f in model.factors]
    lf = fixed + sum(p[0] for p in parts)
    w, ll = _weights_loglik(lf, st)
    wc = w * st.row_counts
    S = np.concatenate([p[1] for p in parts], axis=1)
    g = S.T @ wc
    H = np.zeros((len(g), len(g)))
    k = 0
    for _, Sf, hess in parts:
        size = Sf.shape[1]
        H[k:k + size, k:k + size] = hess(wc)
        k += size
    if st.has_missing:
        # single precision suffices: the Hessian only shapes the step, the
        # gradient fixes the solution and every step is checked for ascent
        R = st.n_inc_rows
        Sb = S[:R].astype(np.float32)
        mean = st.segment_sum(Sb * w[:R, None].astype(np.float32))
        Sb -= mean[st.seg_of_row]
        Sb *= np.sqrt(wc[:R]).astype(np.float32)[:, None]
        H += (Sb.T @ Sb).astype(float)
    return _Eval(ll, w, g, H)


def gradient_hessian(model: _Model, theta, st, w=None):
    """Gradient and Hessian of the importance-sampled log-likelihood."""
    ev = _evaluate(model, theta, st, model.fixed_ll(theta, st))
    return ev.grad, ev.hessian


def _newton_direction(ev: _Eval):
    """Newton step; away from concavity the Hessian's eigenvalues are
    reflected and floored so the step is still an ascent direction."""
    try:
        L = np.linalg.cholesky(-ev.hessian)
        step = np.linalg.solve(L.T, np.linalg.solve(L, ev.grad))
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(-ev.hessian)
        floor = 1e-3 * max(np.max(np.abs(vals)), 1e-12)
        vals = np.maximum(np.abs(vals), floor)
        step = vecs @ ((vecs.T @ ev.grad) / vals)
    return step if np.all(np.isfinite(step)) else None


def _iterate(model, spec, st, theta, fixed, tol, max_iter, method, on_step=None,
             plateau: Optional[int] = None):
    """Monotone iterations from ``theta``; returns ``(theta, eval, status, n_iter)``.

    A Newton step (halved at most twice) is taken when it does not lower the
    log-likelihood; otherwise the EM step. ``status`` is ``"converged"``,
    ``"max_iter"`` or, when ``plateau`` is set, ``"plateau"`` after that many
    consecutive steps with a relative log-likelihood gain below 1e-10 (the
    maximizer then lies at infinity along some direction).
    """
    newton = method == "newton"
    flat_steps = 0
    ev = _evaluate(model, theta, st, fixed, derivs=newton)
    if on_step is not None:
        on_step(ev, None, None)
    for it in range(1, max_iter + 1):
        new = new_ev = None
        kind = "em"
        step = _newton_direction(ev) if newton else None
        if step is not None:
            vec = model.vector(theta)
            for scale in (1.0, 0.5, 0.25):
                cand = model.from_vector(theta, vec + scale * step)
                # a step below tolerance ends the loop: no derivatives needed
                small = np.max(np.abs(cand.flat() - theta.flat())) < tol
                cand_ev = _evaluate(model, cand, st, fixed, derivs=not small)
                # ties at rounding level count as ascent
                if np.isfinite(cand_ev.loglik) and cand_ev.loglik >= ev.loglik - 1e-12 * abs(ev.loglik):
                    new, new_ev, kind = cand, cand_ev, "newton"
                    break
        if new is None:
            new = m_step(spec, st, ev.weights, theta, model)
            new_ev = _evaluate(model, new, st, fixed, derivs=newton)
        change = float(np.max(np.abs(new.flat() - theta.flat())))
        gain = new_ev.loglik - ev.loglik
        theta, ev = new, new_ev
        if on_step is not None:
            on_step(ev, kind, change)
        if change < tol:
            return theta, ev, "converged", it
        flat_steps = flat_steps + 1 if gain < 1e-10 * abs(ev.loglik) else 0
        if plateau is not None and flat_steps >= plateau:
            return theta, ev, "plateau", it
    return theta, ev, "max_iter", max_iter


# fitting --------------------------------------------------------------------


@dataclass
class FiState:
    M: int
    stacked: Stacked
    weights: np.ndarray
    theta: ParamTheta
    iterations: int = 0
    loglik_trace: List[float] = field(default_factory=list)
    step_kinds: List[str] = field(default_factory=list)
    refreshes: List[int] = field(default_factory=list)
    converged: bool = False
    hessian: Optional[np.ndarray] = None
    spec: Optional[ParamModelSpec] = None

    @property
    def imputed(self) -> np.ndarray:
        return self.stacked.expand(self.stacked.x)

    def unit_weights(self) -> np.ndarray:
        st = self.stacked
        return st.expand(self.weights / st.mult)


def _draw_missing(spec, theta, block, mis_cols, rng):
    """Fill missing columns in order from the covariate model; returns log h."""
    log_h = np.zeros(block.shape[0])
    for j in mis_cols:
        lin = np.column_stack([np.ones(block.shape[0]), block[:, :j]]) @ theta.lam[j]
        if spec.families[j] == "gaussian":
            sd = np.sqrt(theta.lam_sigma2[j])
            block[:, j] = lin + sd * rng.standard_normal(len(lin))
            res = block[:, j] - lin
            log_h += -0.5 * (LOG_2PI + np.log(theta.lam_sigma2[j]) + res * res / theta.lam_sigma2[j])
        else:
            lo, hi = spec.binary_levels[j]
            t = (rng.random(len(lin)) < expit(lin)).astype(float)
            block[:, j] = lo + (hi - lo) * t
            log_h += t * log_expit(lin) + (1 - t) * log_expit(-lin)
    return log_h


def build_stacked(d: Dataset, spec: ParamModelSpec, theta: ParamTheta, M: int,
                  rng: np.random.Generator) -> Stacked:
    """Draw ``M`` imputations per incomplete unit from the covariate model."""
    pattern = _pattern_codes(d, spec)
    inc = np.flatnonzero(~d.complete)
    cc = np.flatnonzero(d.complete)
    unit = np.concatenate([np.repeat(inc, M), cc])
    x = d.x[unit].copy()
    log_h = np.zeros(len(unit))
    # units sharing a pattern are drawn together
    for bits in {tuple(row) for row in d.r[inc].tolist()}:
        k = np.flatnonzero(np.all(d.r[inc] == np.asarray(bits), axis=1))
        rows = (k[:, None] * M + np.arange(M)).ravel()
        block = x[rows]
        mis = [j for j, b in enumerate(bits) if b == 0]
        log_h[rows] = _draw_missing(spec, theta, block, mis, rng)
        x[rows] = block
    keep, mult, seg_len = _merge_duplicate_draws(spec, d.r[inc], x, M)
    rows = np.concatenate([keep, len(inc) * M + np.arange(len(cc))])
    return Stacked(
        x=x[rows],
        a=d.a[unit[rows]].astype(np.int8),
        y=d.y[unit[rows]],
        pattern=pattern[unit[rows]],
        log_h=log_h[rows],
        inc_units=inc,
        cc_units=cc,
        M=M,
        mult=np.concatenate([mult, np.ones(len(cc))]),
        seg_len=seg_len,
    )


def _merge_duplicate_draws(spec, r_inc, x, M):
    """Collapse repeated draws of a unit whose missing columns are all binary."""
    keep, mult, seg_len = [], [], np.full(len(r_inc), M, dtype=np.intp)
    for k, bits in enumerate(r_inc.tolist()):
        rows = k * M + np.arange(M)
        mis = [j for j, b in enumerate(bits) if b == 0]
        if all(spec.families[j] == "bernoulli" for j in mis):
            _, first, counts = np.unique(x[np.ix_(rows, mis)], axis=0,
                                         return_index=True, return_counts=True)
            keep.append(rows[first])
            mult.append(counts.astype(float))
            seg_len[k] = len(first)
        else:
            keep.append(rows)
            mult.append(np.ones(M))
    if not keep:
        return np.zeros(0, np.intp), np.zeros(0), seg_len
    return np.concatenate(keep), np.concatenate(mult), seg_len


def _pattern_codes(d: Dataset, spec: ParamModelSpec) -> np.ndarray:
    pat_of = {pat.bits: k for k, pat in enumerate(spec.patterns)}
    return np.array([pat_of[tuple(row)] for row in d.r.tolist()], dtype=np.intp)


def stacked_from_values(d: Dataset, spec: ParamModelSpec, x_full: np.ndarray) -> Stacked:
    """One fractional row per unit carrying the given covariates (``M = 1``)."""
    inc = np.flatnonzero(~d.complete)
    cc = np.flatnonzero(d.complete)
    unit = np.concatenate([inc, cc])
    return Stacked(
        x=np.asarray(x_full, dtype=float)[unit].copy(),
        a=d.a[unit].astype(np.int8),
        y=d.y[unit].copy(),
        pattern=_pattern_codes(d, spec)[unit],
        log_h=np.zeros(d.n),
        inc_units=inc,
        cc_units=cc,
        M=1,
    )


def complete_case_theta(d: Dataset, spec: ParamModelSpec) -> ParamTheta:
    """Per-factor MLE on complete cases; the pattern model starts at its intercepts.

    Covariate factors whose columns are never missing use every unit.
    """
    cc = d.complete
    p = d.p
    if cc.sum() < p + 2:
        raise ValueError("too few complete cases to initialize the parametric model")
    x, a, y = d.x[cc], d.a[cc], d.y[cc]
    D = np.column_stack([np.ones(len(y)), x])
    w = np.ones(len(y))
    alpha = _newton_logistic(D, a.astype(float), w, np.zeros(p + 1))
    beta, sigma2 = [], np.zeros(2)
    for arm in (0, 1):
        m = a == arm
        if m.sum() < p + 2:
            raise ValueError(f"too few complete cases in arm {arm}")
        b, s2 = _weighted_ls(D[m], y[m], w[m])
        beta.append(b)
        sigma2[arm] = s2
    n_cat = len(spec.patterns)
    counts = np.array([np.all(d.r == np.asarray(pat.bits), axis=1).sum() for pat in spec.patterns])
    eta = np.zeros((n_cat - 1, p + 2))
    if n_cat > 1:
        eta[:, 0] = np.log(np.maximum(counts[1:], 0.5) / max(counts[0], 0.5))
    ever = np.any(d.r == 0, axis=0)
    lam, lam_s2 = [], np.ones(p)
    for j in range(p):
        rows = np.ones(d.n, bool) if not np.any(ever[: j + 1]) else cc
        Dj = np.column_stack([np.ones(rows.sum()), d.x[rows][:, :j]])
        col = d.x[rows, j]
        wj = np.ones(rows.sum())
        if spec.families[j] == "gaussian":
            l, s2 = _weighted_ls(Dj, col, wj)
            lam.append(l)
            lam_s2[j] = s2
        else:
            lo, hi = spec.binary_levels[j]
            lam.append(_newton_logistic(Dj, (col - lo) / (hi - lo), wj, np.zeros(j + 1)))
    return ParamTheta(alpha=alpha, beta=beta, sigma2=sigma2, eta=eta, lam=lam, lam_sigma2=lam_s2)


def fit_mle_fractional(
    d: Dataset,
    spec: Optional[ParamModelSpec] = None,
    M: int = 100,
    tol: float = 1e-5,
    max_iter: int = 200,
    rng: Optional[np.random.Generator] = None,
    theta0: Optional[ParamTheta] = None,
    stacked: Optional[Stacked] = None,
    method: str = "newton",
    max_refresh: int = 3,
    raise_on_nonconvergence: bool = True,
) -> Tuple[ParamTheta, FiState]:
    """Fractional-imputation MLE of the factorized model.

    ``method="em"`` runs plain EM steps; ``"newton"`` tries a Newton step on
    the importance-sampled log-likelihood first and falls back to the EM
    step whenever the Newton step fails to increase it. Both keep the
    log-likelihood nondecreasing and share the same fixed point.
    ``stacked`` supplies fixed fractional observations; otherwise draws come
    from the covariate model at the starting value.
    """
    if method not in ("em", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if spec is None:
        spec = ParamModelSpec.infer(d)
    spec.check(d)
    theta = complete_case_theta(d, spec) if theta0 is None else theta0.copy()
    st = build_stacked(d, spec, theta, M, rng) if stacked is None else stacked
    # supplied rows are fixed: never redrawn
    max_refresh = max_refresh if stacked is None else 0
    if st.has_missing and np.linalg.matrix_rank(st.Z) < st.Z.shape[1]:
        warnings.warn("missingness design matrix is rank-deficient", RuntimeWarning)
    ever = np.zeros(spec.p, bool)
    for pat in spec.patterns:
        ever[list(pat.mis_idx)] = True
    model = _Model(spec, ever)
    fixed = model.fixed_ll(theta, st)
    state = FiState(M=st.M, stacked=st, weights=np.ones(len(st.y)), theta=theta, spec=spec)
    trace: List[float] = []

    def record(ev, kind, change):
        if kind is None:
            if state.loglik_trace:
                state.loglik_trace[-1] = ev.loglik
            else:
                state.loglik_trace.append(ev.loglik)
            return
        state.loglik_trace.append(ev.loglik)
        state.step_kinds.append(kind)
        trace.append(change)

    done = 0
    while True:
        theta, ev, status, used = _iterate(
            model, spec, st, theta, fixed, tol, max_iter - done, method, record
        )
        converged = status == "converged"
        done += used
        # degenerate weights are checked at each fixed point
        if not converged or done >= max_iter or not st.has_missing:
            break
        R = st.n_inc_rows
        ess = 1.0 / st.segment_sum(ev.weights[:R] ** 2 / st.mult[:R])
        if np.mean(ess < 2) <= 0.10 or len(state.refreshes) >= max_refresh:
            break
        warnings.warn("fractional weights degenerate; refreshing draws", RuntimeWarning)
        st = build_stacked(d, spec, theta, st.M, rng)
        fixed = model.fixed_ll(theta, st)
        state.refreshes.append(done)
        converged = False
    state.stacked = st
    state.iterations = done
    state.converged = converged
    state.weights = ev.weights
    state.theta = theta
    if ev.hessian is None:
        ev = _evaluate(model, theta, st, fixed)
    state.hessian = ev.hessian
    if not converged and raise_on_nonconvergence:
        raise ConvergenceError(f"no convergence in {max_iter} iterations", trace)
    return theta, state


def refit_on_units(state: FiState, idx, tol: float = 1e-5, max_iter: int = 200,
                   method: str = "newton", accept_plateau: bool = True):
    """Solve the fractional score equation on resampled units.

    Reuses the units' draws and proposal densities and starts from the
    full-sample estimate, so only the weights move. A resample may have no
    finite maximizer (separation in the pattern model); with
    ``accept_plateau`` the fit stops once the log-likelihood stalls and the
    returned state has ``converged=False``.
    """
    spec = state.spec
    st = state.stacked.subset(idx)
    model = _model_for(spec, st)
    fixed = model.fixed_ll(state.theta, st)
    theta, ev, status, used = _iterate(
        model, spec, st, state.theta.copy(), fixed, tol, max_iter, method,
        plateau=5 if accept_plateau else None,
    )
    if status == "max_iter":
        raise ConvergenceError(f"bootstrap refit did not converge in {max_iter} iterations")
    out = FiState(M=st.M, stacked=st, weights=ev.weights, theta=theta, spec=spec,
                  iterations=used, converged=status == "converged", loglik_trace=[ev.loglik])
    return theta, out


def param_tau(theta: ParamTheta, state: FiState) -> float:
    """Average of ``(1, x)'(beta1 - beta0)`` over weighted fractional rows."""
    st = state.stacked
    per_row = st.D @ (theta.beta[1] - theta.beta[0])
    return float(np.sum(state.weights * st.row_counts * per_row) / st.n)


def observed_loglik(spec, theta, st) -> float:
    return e_step(spec, theta, st)[1]


# per-factor weighted log-likelihoods and scores in the natural parametrization


def factor_names(spec: ParamModelSpec) -> List[str]:
    names = ["alpha", "beta0", "beta1"]
    if len(spec.patterns) > 1:
        names.append("eta")
    return names + [f"lambda{j}" for j in range(spec.p)]


def _factor_object(spec, name):
    everything = _Model(spec, np.ones(spec.p, bool))
    for f in everything.factors:
        if f.name == name:
            return everything, f
    raise KeyError(name)


def factor_params(theta: ParamTheta, name: str, spec: ParamModelSpec) -> np.ndarray:
    """Factor parameters with variances (not log variances) last."""
    model, f = _factor_object(spec, name)
    v = model.get(theta, f)
    if f.kind == "gauss":
        v[-1] = np.exp(v[-1])
    return v


def with_factor_params(theta: ParamTheta, name: str, spec: ParamModelSpec, v) -> ParamTheta:
    model, f = _factor_object(spec, name)
    v = np.asarray(v, dtype=float).copy()
    if f.kind == "gauss":
        v[-1] = np.log(v[-1])
    out = theta.copy()
    model.put(out, f, v)
    return out


def factor_loglik(spec, theta: ParamTheta, st: Stacked, w, name: str) -> float:
    model, f = _factor_object(spec, name)
    return float(np.sum(w * f.ll(model.get(theta, f), st)))


def factor_score(spec, theta: ParamTheta, st: Stacked, w, name: str) -> np.ndarray:
    """Gradient of :func:`factor_loglik` in :func:`factor_params` coordinates."""
    model, f = _factor_object(spec, name)
    v = model.get(theta, f)
    g = f.score(v, st).T @ w
    if f.kind == "gauss":
        # chain rule from log variance to variance
        g[-1] = g[-1] / np.exp(v[-1])
    return g
