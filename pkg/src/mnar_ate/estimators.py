"""Average-treatment-effect estimators and the bootstrap.

Function forms (``unadjusted``, ``gpsw``, ``nonpara_tau``, ``para_tau``)
take a :class:`~mnar_ate.data.Dataset` and return an :class:`EstimateResult`.
The estimator classes at the bottom wrap them in the scikit-learn protocol.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .data import Dataset, index_patterns
from .parametric import (
    ConvergenceError,
    FiState,
    ParamModelSpec,
    fit_mle_fractional,
    param_tau,
    refit_on_units,
)
from .series import XiModel, fit_xi, response_prob
from .smoothers import CvConfig, NadarayaWatson, SplineRegression, cv_bandwidth

logger = logging.getLogger(__name__)

MAX_NONPARA_P = 3


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimateResult:
    method: str
    estimate: float
    se: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ci is not None:
            lo, hi = self.ci
            if not lo <= self.estimate <= hi:
                self.diagnostics["ci_excludes_estimate"] = True

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "estimate": self.estimate,
            "se": self.se,
            "ci": None if self.ci is None else [self.ci[0], self.ci[1]],
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_arms(d: Dataset, rows=None) -> None:
    a = d.a if rows is None else d.a[rows]
    for arm in (0, 1):
        if not np.any(a == arm):
            raise EstimationError(f"arm {arm} is empty")


# baselines ------------------------------------------------------------------


def unadjusted(d: Dataset) -> EstimateResult:
    """Difference in mean outcomes between arms."""
    _check_arms(d)
    est = float(d.y[d.a == 1].mean() - d.y[d.a == 0].mean())
    return EstimateResult("unadjusted", est)


def _fit_group_propensity(x, a) -> Optional[np.ndarray]:
    if x.shape[1] == 0:
        return np.full(len(a), a.mean())
    model = LogisticRegression(penalty=None, max_iter=1000)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            model.fit(x, a)
        except ConvergenceWarning:
            return None
    return model.predict_proba(x)[:, 1]


def gpsw(
    d: Dataset,
    clip: Tuple[float, float] = (0.01, 0.99),
    weighting: str = "hajek",
    propensity: Optional[np.ndarray] = None,
) -> EstimateResult:
    """Generalized propensity-score weighting.

    The propensity is a logistic regression of A on the covariates observed
    in each missingness pattern, fitted separately per pattern. Patterns
    lacking one arm, or whose fit diverges, are dropped with a warning.
    ``propensity`` overrides the fitted scores (one per unit).
    """
    if weighting not in ("hajek", "ht"):
        raise ValueError(f"unknown weighting {weighting!r}")
    _check_arms(d)
    score = np.full(d.n, np.nan)
    dropped = []
    if propensity is not None:
        score = np.asarray(propensity, dtype=float).copy()
        if score.shape != (d.n,):
            raise ValueError("need one propensity per unit")
    else:
        idx = index_patterns(d)
        for pat in idx.patterns():
            rows = idx.members(pat)
            a = d.a[rows]
            if a.min() == a.max():
                warnings.warn(f"pattern {pat.label()} has one arm only; dropped", RuntimeWarning)
                dropped.append(pat.label())
                continue
            fitted = _fit_group_propensity(d.x[np.ix_(rows, list(pat.obs_idx))], a)
            if fitted is None:
                warnings.warn(f"propensity fit diverged in pattern {pat.label()}; dropped",
                              RuntimeWarning)
                dropped.append(pat.label())
                continue
            score[rows] = fitted
    keep = ~np.isnan(score)
    _check_arms(d, keep)
    e = np.clip(score[keep], *clip)
    a, y = d.a[keep], d.y[keep]
    w1 = a / e
    w0 = (1 - a) / (1 - e)
    if weighting == "hajek":
        est = np.sum(w1 * y) / np.sum(w1) - np.sum(w0 * y) / np.sum(w0)
    else:
        est = np.mean(w1 * y) - np.mean(w0 * y)
    diag = {
        "weighting": weighting,
        "dropped_patterns": dropped,
        "clipped": int(np.sum((score[keep] < clip[0]) | (score[keep] > clip[1]))),
    }
    return EstimateResult("gpsw", float(est), diagnostics=diag)


# complete-case conditional effect -----------------------------------------


SMOOTHERS = ("spline", "nw")


@dataclass
class CateModel:
    """``x -> E(Y | A=1, x, complete) - E(Y | A=0, x, complete)``."""

    arms: Dict[int, object]
    smoother: str = "spline"

    @property
    def tuning(self) -> Dict[int, object]:
        """Smoothing parameter per arm: ridge penalty or bandwidth vector."""
        if self.smoother == "nw":
            return {a: m.bandwidth_ for a, m in self.arms.items()}
        return {a: m.alpha_ for a, m in self.arms.items()}

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.arms[1].predict(x) - self.arms[0].predict(x)


def cate_complete_case(
    d: Dataset,
    tuning: Optional[Dict[int, object]] = None,
    cv: CvConfig = CvConfig(),
    smoother: str = "spline",
) -> CateModel:
    """Per-arm regressions of Y on X over complete cases.

    ``smoother`` is ``"spline"`` (additive penalized cubic splines) or
    ``"nw"`` (Nadaraya-Watson); ``tuning`` fixes the per-arm smoothing
    parameter, otherwise chosen by cross-validation.
    """
    if smoother not in SMOOTHERS:
        raise ValueError(f"unknown smoother {smoother!r}")
    arms = {}
    for a in (0, 1):
        rows = d.complete & (d.a == a)
        if not np.any(rows):
            raise EstimationError(f"no complete cases in arm {a}")
        X, y = d.x[rows], d.y[rows]
        fixed = None if tuning is None else tuning.get(a)
        if smoother == "nw":
            h = cv_bandwidth(X, y, cv) if fixed is None else fixed
            arms[a] = NadarayaWatson(bandwidth=h).fit(X, y)
        else:
            arms[a] = SplineRegression(alpha="cv" if fixed is None else fixed, cv=cv).fit(X, y)
    return CateModel(arms, smoother)


# nonparametric two-stage estimator ----------------------------------------


@dataclass
class NonparaFit:
    """Fitted pieces of :func:`nonpara_tau`, reusable as frozen tuning."""

    cate: CateModel
    xi: Optional[XiModel]
    J: int
    B: float

    def tuning(self) -> dict:
        out = {("cate", a): h for a, h in self.cate.tuning.items()}
        if self.xi is not None:
            out.update(self.xi.bandwidths)
        return out


def nonpara_tau(
    d: Dataset,
    J: int = 5,
    B: float = 50.0,
    cv: CvConfig = CvConfig(),
    clip: float = 0.01,
    self_normalized: bool = False,
    tuning: Optional[dict] = None,
    response: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    smoother: str = "spline",
    return_fit: bool = False,
):
    """Nonparametric estimate of the average treatment effect.

    Weights each arm's complete cases by the inverse of the estimated
    complete-case probability ``P(R = 1 | A = a, X)``, recovered from the
    odds series, and averages the complete-case conditional effect:

        tau = sum_a P(A=a, R=1) * mean_{complete, A=a} tau(X_i) / P(R=1 | a, X_i)

    ``tuning`` freezes bandwidths from an earlier fit (see
    :meth:`NonparaFit.tuning`); ``response`` replaces the estimated
    complete-case probability by a known function ``(a, x) -> prob``.
    """
    if d.p > MAX_NONPARA_P:
        raise EstimationError(
            f"nonparametric estimator supports at most {MAX_NONPARA_P} covariates "
            f"(got {d.p}); use the parametric estimator"
        )
    _check_arms(d, d.complete)
    tuning = tuning or {}
    cate_tuning = {a: tuning[("cate", a)] for a in (0, 1) if ("cate", a) in tuning}
    cate = cate_complete_case(d, cate_tuning or None, cv, smoother)
    xi = None
    if response is None and np.any(~d.complete):
        xi = fit_xi(d, J=J, B=B, cv=cv, bandwidths=tuning)
    clips = {}
    est = 0.0
    per_arm = {}
    for a in (0, 1):
        rows = np.flatnonzero(d.complete & (d.a == a))
        x = d.x[rows]
        if response is not None:
            prob = np.clip(np.asarray(response(a, x), dtype=float), clip, 1.0)
        elif xi is None:
            prob = np.ones(len(rows))
        else:
            prob = response_prob(xi, x, a, clip=clip, counter=clips)
        inv = 1.0 / prob
        effect = cate(x)
        if self_normalized:
            arm_mean = np.sum(effect * inv) / np.sum(inv) * np.mean(inv)
        else:
            arm_mean = np.mean(effect * inv)
        share = len(rows) / d.n
        per_arm[a] = {"complete_cases": int(len(rows)), "mean_inverse_prob": float(np.mean(inv))}
        est += share * arm_mean
    diag = {
        "J": J,
        "B": B,
        "clipped": clips.get("clipped", 0),
        "arms": per_arm,
        "self_normalized": self_normalized,
        "smoother": smoother,
    }
    if xi is not None:
        diag["series"] = {
            f"{pat.label()}|a={a}": info for (pat, a), info in xi.diagnostics.items()
        }
    result = EstimateResult("nonpara", float(est), diagnostics=diag)
    if return_fit:
        return result, NonparaFit(cate=cate, xi=xi, J=J, B=B)
    return result


# parametric fractional imputation ----------------------------------------


def para_tau(
    d: Dataset,
    M: int = 100,
    tol: float = 1e-5,
    max_iter: int = 200,
    seed: int = 0,
    spec: Optional[ParamModelSpec] = None,
    return_fit: bool = False,
):
    """Parametric estimate: average of ``(1, x)'(beta1 - beta0)`` under the
    fractional weights of the maximum-likelihood fit."""
    _check_arms(d)
    theta, state = fit_mle_fractional(
        d, spec=spec, M=M, tol=tol, max_iter=max_iter, rng=np.random.default_rng(seed)
    )
    diag = {
        "iterations": state.iterations,
        "refreshes": len(state.refreshes),
        "M": M,
        "newton_steps": state.step_kinds.count("newton"),
        "loglik": state.loglik_trace[-1],
    }
    result = EstimateResult("para", param_tau(theta, state), diagnostics=diag)
    if return_fit:
        return result, state
    return result


# bootstrap ------------------------------------------------------------------


@dataclass
class BootstrapResult:
    se: float
    ci: Tuple[float, float]
    estimates: np.ndarray
    failures: int

    def to_dict(self) -> dict:
        return {"se": self.se, "ci": list(self.ci), "failures": self.failures,
                "n_boot": int(len(self.estimates))}


def resample_indices(n: int, seed: int, replicate: int) -> np.ndarray:
    """Unit indices of one bootstrap replicate; stream fixed by (seed, replicate)."""
    return np.random.default_rng([seed, replicate]).integers(0, n, n)


def bootstrap_ci(
    estimator: Callable[[Dataset, np.ndarray], float],
    d: Dataset,
    n_boot: int = 100,
    level: float = 0.95,
    seed: int = 0,
    max_failure_rate: float = 0.05,
) -> BootstrapResult:
    """Percentile bootstrap over units.

    ``estimator(resample, idx)`` returns the point estimate on the resampled
    dataset, ``idx`` being the drawn unit indices. Tuning parameters are
    the caller's to freeze inside the closure. Replicates that raise are
    counted; more than ``max_failure_rate`` of them is an error.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be positive")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    estimates, failures = [], 0
    for b in range(n_boot):
        idx = resample_indices(d.n, seed, b)
        try:
            value = float(estimator(d.subset(idx), idx))
        except (EstimationError, ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
            failures += 1
            continue
        if not np.isfinite(value):
            failures += 1
            continue
        estimates.append(value)
    if failures > max_failure_rate * n_boot:
        raise EstimationError(f"{failures} of {n_boot} bootstrap replicates failed")
    est = np.asarray(estimates)
    alpha = 1.0 - level
    lo, hi = np.quantile(est, [alpha / 2, 1 - alpha / 2])
    se = float(est.std(ddof=1)) if len(est) > 1 else 0.0
    return BootstrapResult(se=se, ci=(float(lo), float(hi)), estimates=est, failures=failures)


def _with_bootstrap(result: EstimateResult, boot: BootstrapResult) -> EstimateResult:
    diag = dict(result.diagnostics)
    diag["bootstrap"] = boot.to_dict()
    return EstimateResult(result.method, result.estimate, boot.se, boot.ci, diag)


METHODS = ("unadjusted", "gpsw", "nonpara", "para")


def estimate_with_ci(
    method: str,
    d: Dataset,
    n_boot: int = 100,
    level: float = 0.95,
    seed: int = 0,
    J: int = 5,
    B: float = 50.0,
    M: int = 100,
    cv: CvConfig = CvConfig(),
) -> EstimateResult:
    """Point estimate plus percentile bootstrap CI with tuning frozen."""
    if method == "unadjusted":
        result = unadjusted(d)
        closure = lambda ds, idx: unadjusted(ds).estimate
    elif method == "gpsw":
        result = gpsw(d)
        closure = lambda ds, idx: gpsw(ds).estimate
    elif method == "nonpara":
        result, fit = nonpara_tau(d, J=J, B=B, cv=cv, return_fit=True)
        tuning = fit.tuning()
        closure = lambda ds, idx: nonpara_tau(ds, J=J, B=B, cv=cv, tuning=tuning).estimate
    elif method == "para":
        result, state = para_tau(d, M=M, seed=seed, return_fit=True)
        plateaus = [0]

        def closure(ds, idx, state=state):
            theta, sub = refit_on_units(state, idx)
            # no finite maximizer on this resample; the plateau value is kept
            plateaus[0] += not sub.converged
            return param_tau(theta, sub)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if n_boot <= 0:
        return result
    boot = bootstrap_ci(closure, d, n_boot=n_boot, level=level, seed=seed)
    result = _with_bootstrap(result, boot)
    if method == "para":
        result.diagnostics["bootstrap"]["plateaus"] = plateaus[0]
    return result


# scikit-learn style wrappers ----------------------------------------------


def _as_dataset(X, y, treatment) -> Dataset:
    if isinstance(X, Dataset):
        return X
    if y is None or treatment is None:
        raise ValueError("pass a Dataset, or covariates with y and treatment")
    return Dataset.from_arrays(treatment, y, X)


class _AteEstimator(BaseEstimator):
    """Shared fit/bootstrap plumbing; subclasses define ``_estimate``."""

    method = ""

    def fit(self, X, y=None, treatment=None):
        """Estimate the effect. ``X`` is a Dataset, or covariates with NaN
        marking missing cells together with ``y`` and ``treatment``."""
        d = _as_dataset(X, y, treatment)
        self.result_ = self._estimate(d)
        self.estimate_ = self.result_.estimate
        self.n_features_in_ = d.p
        self._data = d
        return self

    def bootstrap(self, n_boot: int = 100, level: float = 0.95, seed: int = 0) -> EstimateResult:
        """Percentile CI for the fitted estimate, tuning frozen."""
        if not hasattr(self, "result_"):
            raise ValueError("call fit before bootstrap")
        boot = bootstrap_ci(self._closure(), self._data, n_boot=n_boot, level=level, seed=seed)
        self.result_ = _with_bootstrap(self.result_, boot)
        return self.result_


class DifferenceInMeans(_AteEstimator):
    def __init__(self):
        pass

    def _estimate(self, d):
        return unadjusted(d)

    def _closure(self):
        return lambda ds, idx: unadjusted(ds).estimate


class PropensityWeightingATE(_AteEstimator):
    def __init__(self, clip=(0.01, 0.99), weighting="hajek"):
        self.clip = clip
        self.weighting = weighting

    def _estimate(self, d):
        return gpsw(d, clip=self.clip, weighting=self.weighting)

    def _closure(self):
        return lambda ds, idx: gpsw(ds, clip=self.clip, weighting=self.weighting).estimate


class NonparametricATE(_AteEstimator):
    """Series-based estimator under outcome-independent missingness."""

    def __init__(self, J=5, B=50.0, clip=0.01, self_normalized=False, cv=None):
        self.J = J
        self.B = B
        self.clip = clip
        self.self_normalized = self_normalized
        self.cv = cv

    def _kwargs(self):
        return dict(J=self.J, B=self.B, clip=self.clip, self_normalized=self.self_normalized,
                    cv=self.cv or CvConfig())

    def _estimate(self, d):
        result, self.fit_ = nonpara_tau(d, return_fit=True, **self._kwargs())
        return result

    def _closure(self):
        tuning = self.fit_.tuning()
        kwargs = self._kwargs()
        return lambda ds, idx: nonpara_tau(ds, tuning=tuning, **kwargs).estimate


class ParametricATE(_AteEstimator):
    """Fractional-imputation maximum likelihood under a parametric model."""

    def __init__(self, M=100, tol=1e-5, max_iter=200, seed=0):
        self.M = M
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed

    def _estimate(self, d):
        result, self.state_ = para_tau(
            d, M=self.M, tol=self.tol, max_iter=self.max_iter, seed=self.seed, return_fit=True
        )
        self.theta_ = self.state_.theta
        return result

    def _closure(self):
        state: FiState = self.state_

        def closure(ds, idx):
            theta, sub = refit_on_units(state, idx, tol=self.tol, max_iter=self.max_iter)
            return param_tau(theta, sub)

        return closure
