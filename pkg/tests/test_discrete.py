import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnar_ate.data import Pattern
from mnar_ate.discrete import (
    DiscreteJoint,
    IdentifiabilityError,
    OverlapError,
    PositivityError,
    XiTable,
    build_theta,
    check_identifiability,
    discrete_tau,
    identify,
    recover_joint,
    solve_xi,
)

from oracles import all_patterns, random_discrete_model


def _mechanism_in_order(model, rec):
    """Generator mechanism re-ordered to the recovered pattern order."""
    order = [model["patterns"].index(p) for p in rec.patterns]
    return model["mechanism"][..., order]


def _hand_joint():
    # 2x2x2 complete-only joint over (a, x, y)
    tab = np.arange(1, 9, dtype=float).reshape(2, 2, 2)
    tab /= tab.sum()
    return DiscreteJoint([np.array([0.0, 1.0])], np.array([0.0, 1.0]), {Pattern((1,)): tab}), tab


def test_theta_matches_direct_lookup():
    j, tab = _hand_joint()
    for a in (0, 1):
        theta = build_theta(j, a)
        for k, cell in itertools.product(range(2), range(2)):
            assert theta[k, cell] == tab[a, cell, k]


def test_theta_cell_order_is_lexicographic():
    rng = np.random.default_rng(0)
    model = random_discrete_model(rng, (2, 3), 6)
    j = model["joint"]
    theta = build_theta(j, 1)
    complete = j.complete_table()[1]
    for col, (u, v) in enumerate(itertools.product(range(2), range(3))):
        assert np.array_equal(theta[:, col], complete[u, v])


def test_theta_zero_without_complete_mass():
    tab = np.full((2, 2), 0.25)
    j = DiscreteJoint([np.array([0.0, 1.0])], np.array([0.0, 1.0]), {Pattern((0,)): tab})
    assert not build_theta(j, 0).any()
    assert not check_identifiability(j).identifiable


def test_theta_scales_with_probabilities():
    j, tab = _hand_joint()
    half = {Pattern((1,)): tab * 0.5, Pattern((0,)): np.full((2, 2), 0.125)}
    j2 = DiscreteJoint(j.levels, j.y_levels, half)
    assert np.allclose(build_theta(j2, 0), 0.5 * build_theta(j, 0))
    assert check_identifiability(j2).ranks == check_identifiability(j).ranks


def test_independent_outcome_is_not_identifiable():
    # binary X, binary Y, X independent of Y given (A, R=1)
    px = np.array([0.3, 0.7])
    py = np.array([[0.4, 0.6], [0.8, 0.2]])
    tab = 0.5 * px[None, :, None] * py[:, None, :]
    j = DiscreteJoint([np.array([0.0, 1.0])], np.array([0.0, 1.0]), {Pattern((1,)): tab})
    report = check_identifiability(j)
    assert not report.identifiable
    assert report.ranks == {0: 1, 1: 1}


def test_two_by_two_determinant_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        tab = rng.dirichlet(np.ones(8)).reshape(2, 2, 2)
        j = DiscreteJoint([np.array([0.0, 1.0])], np.array([0.0, 1.0]), {Pattern((1,)): tab})
        dets = [np.linalg.det(tab[a]) for a in (0, 1)]
        expected = all(abs(d) > 1e-10 * np.abs(tab[a]).max() ** 2 for a, d in enumerate(dets))
        assert check_identifiability(j).identifiable == expected


def test_single_cell_always_identifiable():
    tab = np.array([[[0.2, 0.3]], [[0.1, 0.4]]])
    j = DiscreteJoint([np.array([5.0])], np.array([0.0, 1.0]), {Pattern((1,)): tab})
    assert check_identifiability(j).identifiable


def test_fewer_outcome_levels_than_cells():
    rng = np.random.default_rng(2)
    j = random_discrete_model(rng, (3,), 2)["joint"]
    report = check_identifiability(j)
    assert not report.identifiable and "K = 2" in report.reason


def test_rank_invariant_to_relabeling():
    rng = np.random.default_rng(3)
    model = random_discrete_model(rng, (3,), 4)
    j = model["joint"]
    perm = np.array([2, 0, 1])
    tables = {}
    for pat, tab in j.tables.items():
        tables[pat] = tab[:, perm] if pat.obs_idx else tab
    j2 = DiscreteJoint([j.levels[0][perm]], j.y_levels, tables)
    assert check_identifiability(j2).ranks == check_identifiability(j).ranks


def test_mcar_gives_constant_odds():
    rng = np.random.default_rng(4)
    model = random_discrete_model(rng, (2, 2), 5)
    f_axy = model["f_axy"]
    probs = np.array([0.5, 0.2, 0.2, 0.1])
    full = f_axy[..., None] * probs
    pats = all_patterns(2)
    j = DiscreteJoint.from_full(model["joint"].levels, model["y_levels"], full, pats)
    xi = solve_xi(j)
    for k, pat in enumerate(pats[1:], start=1):
        for a in (0, 1):
            assert np.allclose(xi.get(pat, a), probs[k] / probs[0], atol=1e-10)


def test_pattern_without_mass_has_zero_odds():
    rng = np.random.default_rng(5)
    model = random_discrete_model(rng, (2,), 3)
    j = model["joint"]
    tables = dict(j.tables)
    empty = Pattern((0,))
    moved = tables[empty].sum()
    tables[empty] = np.zeros_like(tables[empty])
    tables[Pattern((1,))] = tables[Pattern((1,))] / (1 - moved)
    xi = solve_xi(DiscreteJoint(j.levels, j.y_levels, tables))
    assert not xi.get(empty, 0).any() and not xi.get(empty, 1).any()


@pytest.mark.parametrize("shape,K", [((2,), 2), ((2,), 4), ((3,), 3), ((2, 2), 4), ((3, 2), 6)])
def test_forward_model_recovered_exactly(shape, K):
    rng = np.random.default_rng(K * 10 + len(shape))
    model = random_discrete_model(rng, shape, K)
    xi = solve_xi(model["joint"])
    rec = recover_joint(model["joint"], xi)
    assert np.max(np.abs(rec.full - model["f_axy"])) < 1e-10
    assert np.max(np.abs(rec.mechanism - _mechanism_in_order(model, rec))) < 1e-10
    assert np.allclose(rec.mechanism.sum(axis=-1), 1.0, atol=1e-12)
    effects = discrete_tau(rec.full, model["y_levels"])
    assert effects["tau"] == pytest.approx(model["tau"], abs=1e-10)
    assert effects["tau_att"] == pytest.approx(model["tau_att"], abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(2,), (3,), (2, 2)]), st.integers(0, 2**31 - 1))
def test_recovery_property(shape, seed):
    rng = np.random.default_rng(seed)
    K = int(np.prod(shape)) + int(rng.integers(0, 3))
    model = random_discrete_model(rng, shape, K)
    rec = recover_joint(model["joint"], solve_xi(model["joint"]))
    assert np.max(np.abs(rec.full - model["f_axy"])) < 1e-8


def test_solve_refuses_non_identifiable():
    rng = np.random.default_rng(6)
    model = random_discrete_model(rng, (2,), 3, independent=True)
    with pytest.raises(IdentifiabilityError):
        solve_xi(model["joint"])


def test_negative_odds_are_clipped_with_warning():
    rng = np.random.default_rng(7)
    model = random_discrete_model(rng, (2,), 4, patterns=[Pattern((1,)), Pattern((0,))])
    j = model["joint"]
    complete = j.complete_table()
    # observed margin equal to Theta_a @ (1, -0.2): the exact solution is negative
    missing = np.stack([np.maximum(build_theta(j, a) @ [1.0, -0.2], 0.0) for a in (0, 1)])
    total = complete.sum() + missing.sum()
    j2 = DiscreteJoint(j.levels, j.y_levels,
                       {Pattern((1,)): complete / total, Pattern((0,)): missing / total})
    with pytest.warns(RuntimeWarning, match="negative"):
        xi = solve_xi(j2)
    assert xi.clipped > 0
    assert np.all(xi.get(Pattern((0,)), 0) >= 0)


def test_complete_joint_recovered_unchanged():
    j, tab = _hand_joint()
    rec = recover_joint(j, solve_xi(j))
    assert np.max(np.abs(rec.full - tab)) < 1e-12
    assert np.allclose(rec.response_prob(), 1.0)


def test_zero_odds_total_is_positivity_error():
    j, _ = _hand_joint()

    class Zero(XiTable):
        def get(self, pat, a):
            return np.zeros(self.shape)

    with pytest.raises(PositivityError):
        recover_joint(j, Zero(shape=j.shape))


def test_null_effect():
    rng = np.random.default_rng(8)
    f_x = rng.dirichlet(np.ones(3))
    f_y = rng.dirichlet(np.ones(4), size=3)
    full = np.stack([0.4 * f_x[:, None] * f_y, 0.6 * f_x[:, None] * f_y])
    assert abs(discrete_tau(full, np.arange(4.0))["tau"]) < 1e-12


def test_constant_cell_effect():
    rng = np.random.default_rng(9)
    f_x = rng.dirichlet(np.ones(3))
    f_y = rng.dirichlet(np.ones(4), size=3)
    y0 = np.arange(5.0)
    base = np.concatenate([f_y, np.zeros((3, 1))], axis=1)
    shifted = np.concatenate([np.zeros((3, 1)), f_y], axis=1)
    full = np.stack([0.5 * f_x[:, None] * base, 0.5 * f_x[:, None] * shifted])
    assert discrete_tau(full, y0)["tau"] == pytest.approx(1.0, abs=1e-12)


def test_standardization_formula_without_missingness():
    rng = np.random.default_rng(10)
    full = rng.dirichlet(np.ones(2 * 3 * 4)).reshape(2, 3, 4)
    y = np.array([0.0, 1.0, 2.5, 4.0])
    f_ax = full.sum(axis=-1)
    mean = full @ y / f_ax
    expected = np.sum(f_ax.sum(axis=0) * (mean[1] - mean[0]))
    assert discrete_tau(full, y)["tau"] == pytest.approx(expected, abs=1e-12)


def test_overlap_violation():
    full = np.zeros((2, 2, 2))
    full[0, 0] = [0.2, 0.2]
    full[1, 1] = [0.3, 0.3]
    full[0, 1] = [0.0, 0.0]
    full[1, 0] = [0.0, 0.0]
    full[0, 1, 0] = 0.0
    with pytest.raises(OverlapError):
        discrete_tau(full / full.sum(), np.array([0.0, 1.0]))


def test_identify_report_is_json():
    rng = np.random.default_rng(11)
    model = random_discrete_model(rng, (2,), 3)
    report = identify(model["joint"])
    text = json.dumps(report)
    assert report["identifiable"] and "mechanism" in report and "singular_values" in text
    assert report["tau"] == pytest.approx(model["tau"], abs=1e-10)


def test_from_dataset_frequencies():
    from mnar_ate.data import Dataset

    d = Dataset(a=[0, 1, 1, 0], y=[0.0, 1, 1, 2], x=[[0.0], [1.0], [0.0], [1.0]],
                r=[[1], [1], [0], [1]])
    j = DiscreteJoint.from_dataset(d)
    assert j.tables[Pattern((1,))].sum() == pytest.approx(0.75)
    assert j.tables[Pattern((0,))][1, 1] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        DiscreteJoint.from_dataset(d, max_levels=2)
