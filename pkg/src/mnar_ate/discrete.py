"""Exact identification for finite-support covariates and outcome.

The observed-data law is stored per missingness pattern: for pattern ``r`` the
table ``f(A, X_obs, Y, R=r)`` with axes ``(a, x_obs levels..., y level)``.
From the complete-case slice we build the ``K x q`` matrices Theta_a, check
their column rank, solve the linear systems for the odds
``xi_ra(x) = P(R=r | a, x) / P(R=1_p | a, x)``, and recover the full law
``f(A, X, Y)`` together with the missingness mechanism.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, Pattern

NEGATIVE_TOL = 1e-8


class IdentifiabilityError(RuntimeError):
    pass


class PositivityError(RuntimeError):
    pass


class OverlapError(RuntimeError):
    pass


@dataclass
class DiscreteJoint:
    levels: List[np.ndarray]
    y_levels: np.ndarray
    tables: Dict[Pattern, np.ndarray]

    def __post_init__(self):
        self.levels = [np.asarray(v, dtype=float) for v in self.levels]
        self.y_levels = np.asarray(self.y_levels, dtype=float)
        if not self.levels or any(len(v) == 0 for v in self.levels) or len(self.y_levels) == 0:
            raise ValueError("supports must be nonempty")
        total = 0.0
        for pat, tab in self.tables.items():
            if pat.p != self.p:
                raise ValueError(f"pattern {pat.bits} has wrong length")
            shape = (2,) + tuple(len(self.levels[j]) for j in pat.obs_idx) + (self.K,)
            if tab.shape != shape:
                raise ValueError(f"table for {pat.bits} has shape {tab.shape}, expected {shape}")
            if np.any(tab < 0):
                raise ValueError("probabilities must be nonnegative")
            total += tab.sum()
        if abs(total - 1.0) > 1e-12 * max(1, len(self.tables)):
            raise ValueError(f"probabilities sum to {total}, not 1")

    @property
    def p(self) -> int:
        return len(self.levels)

    @property
    def K(self) -> int:
        return len(self.y_levels)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(v) for v in self.levels)

    @property
    def q(self) -> int:
        return int(np.prod(self.shape))

    @property
    def complete_pattern(self) -> Pattern:
        return Pattern.complete_pattern(self.p)

    def complete_table(self) -> np.ndarray:
        """``f(A, X, Y, R=1_p)`` with axes ``(a, x1..xp, y)``."""
        pat = self.complete_pattern
        if pat in self.tables:
            return self.tables[pat]
        return np.zeros((2,) + self.shape + (self.K,))

    def incomplete_patterns(self) -> List[Pattern]:
        return sorted((q for q in self.tables if not q.is_complete), reverse=True)

    @classmethod
    def from_full(cls, levels, y_levels, full: np.ndarray, patterns: Sequence[Pattern]):
        """Marginalize a full table ``f(A, X, Y, R)`` to the observed-data law.

        ``full`` has axes ``(a, x1..xp, y, pattern)`` with patterns in the
        order given.
        """
        p = len(levels)
        tables = {}
        for k, pat in enumerate(patterns):
            slab = full[..., k]
            mis_axes = tuple(1 + j for j in pat.mis_idx)
            tables[Pattern(pat.bits)] = slab.sum(axis=mis_axes) if mis_axes else slab.copy()
        if Pattern.complete_pattern(p) not in tables:
            tables[Pattern.complete_pattern(p)] = np.zeros(full.shape[:-1])
        return cls(levels=list(levels), y_levels=y_levels, tables=tables)

    @classmethod
    def from_dataset(cls, d: Dataset, max_levels: Optional[int] = None):
        """Empirical cell frequencies of an integer-coded dataset."""
        levels = []
        for j in range(d.p):
            col = d.x[d.r[:, j] == 1, j]
            vals = np.unique(col)
            if max_levels is not None and len(vals) > max_levels:
                raise ValueError(
                    f"covariate x{j + 1} has {len(vals)} distinct values; "
                    "use the nonparametric estimator for continuous data"
                )
            if len(vals) == 0:
                raise ValueError(f"covariate x{j + 1} is never observed")
            levels.append(vals)
        y_levels = np.unique(d.y)
        if max_levels is not None and len(y_levels) > max_levels:
            raise ValueError(
                f"outcome has {len(y_levels)} distinct values; "
                "use the nonparametric estimator for continuous data"
            )
        yk = np.searchsorted(y_levels, d.y)
        tables = {}
        for bits in {tuple(row) for row in d.r.tolist()} | {(1,) * d.p}:
            pat = Pattern(bits)
            shape = (2,) + tuple(len(levels[j]) for j in pat.obs_idx) + (len(y_levels),)
            tab = np.zeros(shape)
            rows = np.flatnonzero(np.all(d.r == np.asarray(bits), axis=1))
            if len(rows):
                idx = [d.a[rows].astype(int)]
                for j in pat.obs_idx:
                    idx.append(np.searchsorted(levels[j], d.x[rows, j]))
                idx.append(yk[rows])
                np.add.at(tab, tuple(idx), 1.0)
            tables[pat] = tab / d.n
        return cls(levels=levels, y_levels=y_levels, tables=tables)


@dataclass
class IdentifiabilityReport:
    identifiable: bool
    ranks: Dict[int, int]
    q: int
    K: int
    singular_values: Dict[int, List[float]]
    condition_numbers: Dict[int, float]
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "identifiable": self.identifiable,
            "q": self.q,
            "K": self.K,
            "ranks": {str(a): r for a, r in self.ranks.items()},
            "singular_values": {str(a): s for a, s in self.singular_values.items()},
            "condition_numbers": {str(a): c for a, c in self.condition_numbers.items()},
            "reason": self.reason,
        }


def build_theta(j: DiscreteJoint, a: int) -> np.ndarray:
    """``K x q`` matrix with entry ``(k, cell) = f(A=a, X=cell, Y=y_k, R=1_p)``.

    Cells are ordered lexicographically with ``x1`` varying slowest.
    """
    tab = j.complete_table()[a]
    return tab.reshape(j.q, j.K).T.copy()


def numerical_rank(M: np.ndarray, tol: float) -> Tuple[int, np.ndarray]:
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] <= 0:
        return 0, s
    return int(np.sum(s > tol * s[0])), s


def check_identifiability(j: DiscreteJoint, tol: float = 1e-10) -> IdentifiabilityReport:
    ranks, svals, conds = {}, {}, {}
    reasons = []
    for a in (0, 1):
        theta = build_theta(j, a)
        r, s = numerical_rank(theta, tol)
        ranks[a] = r
        svals[a] = s.tolist()
        smin = s[min(j.q, len(s)) - 1] if len(s) >= j.q else 0.0
        conds[a] = float(s[0] / smin) if smin > 0 else float("inf")
        if r < j.q:
            reasons.append(f"rank(Theta_{a}) = {r} < q = {j.q}")
    if j.K < j.q:
        reasons.insert(0, f"K = {j.K} outcome levels < q = {j.q} covariate cells")
    return IdentifiabilityReport(
        identifiable=not reasons,
        ranks=ranks,
        q=j.q,
        K=j.K,
        singular_values=svals,
        condition_numbers=conds,
        reason="; ".join(reasons),
    )


@dataclass
class XiTable:
    shape: Tuple[int, ...]
    values: Dict[Tuple[Pattern, int], np.ndarray] = field(default_factory=dict)
    residuals: Dict[Tuple[Pattern, int], float] = field(default_factory=dict)
    clipped: int = 0

    def get(self, pat: Pattern, a: int) -> np.ndarray:
        if pat.is_complete:
            return np.ones(self.shape)
        return self.values.get((pat, a), np.zeros(self.shape))


def solve_xi(j: DiscreteJoint, tol: float = 1e-10) -> XiTable:
    """Solve the per-pattern linear systems for the odds functions.

    A fully missing pattern gives one ``K x q`` system; a partially missing
    pattern gives one system per value of its observed sub-cell, whose
    matrix is the block of Theta_a with those observed coordinates fixed.
    Overdetermined systems are solved in the least-squares sense.
    """
    report = check_identifiability(j, tol)
    if not report.identifiable:
        raise IdentifiabilityError(report.reason)
    complete = j.complete_table()
    out = XiTable(shape=j.shape)
    for pat in j.incomplete_patterns():
        obs, mis = pat.obs_idx, pat.mis_idx
        obs_shape = tuple(j.shape[k] for k in obs)
        mis_shape = tuple(j.shape[k] for k in mis)
        tab_r = j.tables[pat]
        for a in (0, 1):
            xi = np.zeros(j.shape)
            resid2 = 0.0
            # axes reordered to (obs..., mis..., y)
            full = np.moveaxis(complete[a], list(obs) + list(mis), list(range(j.p)))
            for v in itertools.product(*(range(s) for s in obs_shape)):
                block = full[v].reshape(int(np.prod(mis_shape)), j.K).T
                rhs = tab_r[(a,) + v]
                rank, _ = numerical_rank(block, tol)
                if rank < block.shape[1]:
                    raise IdentifiabilityError(
                        f"pattern {pat.label()}, arm {a}, observed cell {v}: "
                        f"rank {rank} < {block.shape[1]}"
                    )
                sol, *_ = np.linalg.lstsq(block, rhs, rcond=None)
                resid2 += float(np.sum((block @ sol - rhs) ** 2))
                if np.any(sol < -NEGATIVE_TOL):
                    warnings.warn(
                        f"negative odds solved for pattern {pat.label()}, arm {a}; clipped to 0",
                        RuntimeWarning,
                    )
                out.clipped += int(np.sum(sol < 0))
                sol = np.maximum(sol, 0.0)
                sub = sol.reshape(mis_shape)
                index = [slice(None)] * j.p
                for k, val in zip(obs, v):
                    index[k] = val
                # remaining axes are the missing ones, in original order
                xi[tuple(index)] = sub
            out.values[(pat, a)] = xi
            out.residuals[(pat, a)] = float(np.sqrt(resid2))
    return out


@dataclass
class RecoveredJoint:
    levels: List[np.ndarray]
    y_levels: np.ndarray
    full: np.ndarray
    patterns: List[Pattern]
    mechanism: np.ndarray

    def response_prob(self) -> np.ndarray:
        """``P(R=1_p | A, X)`` with axes ``(a, x1..xp)``."""
        k = [q.is_complete for q in self.patterns].index(True)
        return self.mechanism[..., k]


def recover_joint(j: DiscreteJoint, xi: XiTable) -> RecoveredJoint:
    """Recover ``f(A, X, Y)`` and ``P(R=r | A, X)`` from the solved odds.

    ``mechanism`` has axes ``(a, x1..xp, pattern)`` in ``patterns`` order.
    """
    patterns = [j.complete_pattern] + j.incomplete_patterns()
    mech = np.zeros((2,) + j.shape + (len(patterns),))
    for a in (0, 1):
        stack = np.stack([xi.get(pat, a) for pat in patterns], axis=-1)
        total = stack.sum(axis=-1, keepdims=True)
        if np.any(~np.isfinite(total)) or np.any(total <= 0):
            raise PositivityError(f"odds sum to zero or non-finite in arm {a}")
        mech[a] = stack / total
    complete = j.complete_table()
    full = complete / mech[..., 0][..., None]
    total = full.sum()
    if abs(total - 1.0) > 1e-8:
        warnings.warn(f"recovered joint sums to {total:.12g}", RuntimeWarning)
    return RecoveredJoint(
        levels=j.levels, y_levels=j.y_levels, full=full, patterns=patterns, mechanism=mech
    )


def discrete_tau(full: np.ndarray, y_levels) -> Dict[str, float]:
    """Exact average effect and effect on the treated from ``f(A, X, Y)``."""
    full = np.asarray(full, dtype=float)
    y_levels = np.asarray(y_levels, dtype=float)
    f_ax = full.sum(axis=-1)
    support = f_ax.sum(axis=0) > 0
    if np.any((f_ax[0] <= 0) & support) or np.any((f_ax[1] <= 0) & support):
        raise OverlapError("an arm has zero mass at a supported covariate cell")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (full @ y_levels) / f_ax
    cate = np.where(support, mean[1] - mean[0], 0.0)
    f_x = f_ax.sum(axis=0)
    tau = float(np.sum(cate * f_x) / f_x.sum())
    tau_att = float(np.sum(cate * f_ax[1]) / f_ax[1].sum())
    return {"tau": tau, "tau_att": tau_att}


def identify(j: DiscreteJoint, tol: float = 1e-10) -> dict:
    """Full report: ranks, and when identifiable, mechanism and exact effects."""
    report = check_identifiability(j, tol)
    out = report.to_dict()
    if not report.identifiable:
        return out
    xi = solve_xi(j, tol)
    rec = recover_joint(j, xi)
    out["residuals"] = {f"{p.label()}|a={a}": v for (p, a), v in xi.residuals.items()}
    out["mechanism"] = {
        f"{pat.label()}|a={a}": rec.mechanism[a][..., k].tolist()
        for a in (0, 1)
        for k, pat in enumerate(rec.patterns)
    }
    out["levels"] = [v.tolist() for v in j.levels]
    out.update(discrete_tau(rec.full, j.y_levels))
    return out
