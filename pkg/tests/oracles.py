"""Independent generators and reference computations shared by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from mnar_ate.data import Pattern
from mnar_ate.discrete import DiscreteJoint


def all_patterns(p):
    return [Pattern(bits) for bits in itertools.product((1, 0), repeat=p)]


def random_discrete_model(rng, shape, K, independent=False, patterns=None):
    """Forward model on finite supports with missingness driven by (A, X) only.

    Returns a dict with the full table ``f(A, X, Y, R)`` (axes a, x..., y, r),
    ``f(A, X, Y)``, the mechanism ``P(R | A, X)`` (axes a, x..., r), the
    exact effects and the marginalized :class:`DiscreteJoint`. With
    ``independent`` the outcome law ignores X, so Theta_a has rank one.
    """
    shape = tuple(shape)
    p = len(shape)
    patterns = list(patterns or all_patterns(p))
    f_x = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    e = rng.uniform(0.2, 0.8, shape)
    f_ax = np.stack([f_x * (1 - e), f_x * e])
    if independent:
        g = rng.dirichlet(np.ones(K), size=2)
        f_y = np.broadcast_to(g.reshape((2,) + (1,) * p + (K,)), (2,) + shape + (K,)).copy()
    else:
        f_y = rng.dirichlet(np.ones(K), size=(2,) + shape)
    logits = rng.normal(0.0, 0.7, (2,) + shape + (len(patterns),))
    logits[..., 0] += 1.0  # complete pattern first, kept likely
    mech = np.exp(logits)
    mech /= mech.sum(axis=-1, keepdims=True)
    f_axy = f_ax[..., None] * f_y
    full_r = f_axy[..., None] * mech[..., None, :]
    y_levels = np.arange(K, dtype=float)
    levels = [np.arange(s, dtype=float) for s in shape]
    cond_mean = f_y @ y_levels
    tau = float(np.sum(f_x * (cond_mean[1] - cond_mean[0])))
    tau_att = float(np.sum(f_ax[1] * (cond_mean[1] - cond_mean[0])) / f_ax[1].sum())
    joint = DiscreteJoint.from_full(levels, y_levels, full_r, patterns)
    return {
        "joint": joint,
        "f_axy": f_axy,
        "mechanism": mech,
        "patterns": patterns,
        "tau": tau,
        "tau_att": tau_att,
        "y_levels": y_levels,
    }


def stratified_difference(a, y, stratum):
    """Stratum-size weighted mean of within-stratum arm differences."""
    total = 0.0
    for s in np.unique(stratum):
        m = stratum == s
        total += m.mean() * (y[m & (a == 1)].mean() - y[m & (a == 0)].mean())
    return total
