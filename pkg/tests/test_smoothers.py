import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mnar_ate.smoothers import (
    CvConfig,
    KernelDensity,
    NadarayaWatson,
    SplineRegression,
    cv_bandwidth,
    kde_eval,
    kde_fit,
    nw_eval,
    nw_fit,
    reference_bandwidth,
)


def test_single_point_density_closed_form():
    model = kde_fit([[0.0]], [1.0])
    assert kde_eval(model, [0.0]) == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)


def test_density_integrates_to_one_1d():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 1))
    h = 0.4
    model = kde_fit(pts, [h])
    lo, hi = pts.min() - 8 * h, pts.max() + 8 * h
    grid = np.linspace(lo, hi, 20001)
    dens = model.density(grid[:, None])
    assert integrate.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_density_integrates_to_one_2d():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(15, 2))
    h = np.array([0.5, 0.3])
    model = kde_fit(pts, h)
    lo = pts.min(axis=0) - 8 * h
    hi = pts.max(axis=0) + 8 * h
    total, _ = integrate.nquad(
        lambda u, v: kde_eval(model, [u, v]), [[lo[0], hi[0]], [lo[1], hi[1]]],
        opts={"epsabs": 1e-6},
    )
    assert total == pytest.approx(1.0, abs=1e-3)


def test_density_symmetry():
    model = kde_fit([[-1.3], [1.3]], [0.7])
    for q in np.linspace(-4, 4, 17):
        assert abs(kde_eval(model, [q]) - kde_eval(model, [-q])) < 1e-12


def test_density_errors():
    with pytest.raises(ValueError):
        kde_fit([[0.0, 1.0]], [1.0, -1.0])
    model = kde_fit([[0.0, 1.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        kde_eval(model, [0.0])


def test_density_positive_far_away():
    model = kde_fit([[0.0]], [0.1])
    assert model.score_samples([[50.0]])[0] > -np.inf


def test_nw_single_point():
    model = nw_fit([[0.5]], [3.0], [0.2])
    for q in (-10.0, 0.5, 7.0):
        assert nw_eval(model, [q]) == 3.0


def test_nw_constant_targets():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 2))
    model = nw_fit(X, np.full(40, -1.5), [0.3, 0.3])
    assert np.allclose(model.predict(rng.normal(size=(10, 2)) * 3), -1.5, atol=1e-12)


def test_nw_interpolates_with_tiny_bandwidth():
    X = np.linspace(0, 1, 11)[:, None]
    y = 2.0 * X[:, 0] - 1.0
    model = nw_fit(X, y, [1e-3])
    for i in (0, 4, 10):
        assert abs(nw_eval(model, X[i]) - y[i]) < 1e-6


def test_nw_nearest_neighbour_when_weights_underflow():
    model = nw_fit([[0.0], [1.0]], [5.0, 7.0], [1e-4])
    assert nw_eval(model, [0.9]) == 7.0


def test_nw_errors():
    with pytest.raises(ValueError):
        NadarayaWatson(bandwidth=[1.0]).fit(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        nw_fit([[0.0]], [1.0], [0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_nw_convex_combination_and_permutation(m, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(m, d))
    y = rng.normal(size=m)
    h = rng.uniform(0.05, 2.0, d)
    Q = rng.normal(size=(5, d)) * 2
    pred = nw_fit(X, y, h).predict(Q)
    assert np.all(pred >= y.min() - 1e-12) and np.all(pred <= y.max() + 1e-12)
    perm = rng.permutation(m)
    assert np.allclose(nw_fit(X[perm], y[perm], h).predict(Q), pred, atol=1e-12)
    dens = kde_fit(X, h).density(Q)
    assert np.all(dens >= 0)
    assert np.allclose(kde_fit(X[perm], h).density(Q), dens, rtol=1e-12)


def test_cv_single_multiplier_returns_reference():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 2))
    h = cv_bandwidth(X, None, CvConfig(grid=(0.7,)))
    assert np.allclose(h, 0.7 * reference_bandwidth(X))


def test_reference_rule():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 1)) * 2
    assert reference_bandwidth(X)[0] == pytest.approx(1.06 * X.std(ddof=1) * 100 ** (-0.2))


def test_cv_deterministic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 2))
    y = X[:, 0] ** 2 + rng.normal(size=120) * 0.1
    cfg = CvConfig(seed=9)
    assert np.array_equal(cv_bandwidth(X, y, cfg), cv_bandwidth(X, y, cfg))
    assert np.array_equal(cv_bandwidth(X, None, cfg), cv_bandwidth(X, None, cfg))


def test_density_bandwidth_envelope():
    ratios = []
    for seed in range(5):
        X = np.random.default_rng(seed).normal(size=(500, 1))
        ratios.append(cv_bandwidth(X, None, CvConfig(seed=seed))[0] / reference_bandwidth(X)[0])
    assert all(0.3 <= r <= 3.0 for r in ratios)


def test_regression_cv_prefers_small_bandwidth_for_wiggly_signal():
    rng = np.random.default_rng(6)
    X = rng.uniform(-3, 3, size=(300, 1))
    y = np.sin(4 * X[:, 0]) + 0.05 * rng.normal(size=300)
    h = cv_bandwidth(X, y, CvConfig())
    assert h[0] < reference_bandwidth(X)[0]


def test_cv_errors():
    with pytest.raises(ValueError):
        CvConfig(grid=())
    with pytest.raises(ValueError):
        cv_bandwidth(np.zeros((5, 1)), None, CvConfig(folds=10))


def test_estimators_accept_cv_string():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(60, 1))
    y = X[:, 0] + rng.normal(size=60) * 0.1
    assert NadarayaWatson(bandwidth="cv").fit(X, y).bandwidth_.shape == (1,)
    assert KernelDensity(bandwidth="cv").fit(X).bandwidth_.shape == (1,)


def test_spline_reproduces_additive_signal():
    rng = np.random.default_rng(8)
    x1 = rng.normal(size=400)
    x2 = rng.integers(0, 2, 400).astype(float)
    X = np.column_stack([x1, x2])
    y = np.sin(x1) + 2 * x2
    model = SplineRegression().fit(X, y)
    Q = np.column_stack([np.linspace(-1.5, 1.5, 7), np.ones(7)])
    assert np.allclose(model.predict(Q), np.sin(Q[:, 0]) + 2, atol=0.05)
    # the two-valued column has no spline basis
    assert model.transformers_[1] is None


def test_spline_fixed_penalty_and_linear_extrapolation():
    X = np.linspace(0, 1, 50)[:, None]
    y = 3 * X[:, 0] + 1
    model = SplineRegression(alpha=1e-8).fit(X, y)
    assert model.alpha_ == 1e-8
    assert model.predict([[2.0]])[0] == pytest.approx(7.0, abs=1e-3)
