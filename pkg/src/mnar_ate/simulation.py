"""Simulation designs, the Monte Carlo driver and bias/variance/coverage reports."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import Dataset
from .estimators import METHODS, EstimationError, estimate_with_ci, nonpara_tau
from .parametric import ConvergenceError

logger = logging.getLogger(__name__)

TAU_A = 1.0

BETA0_B = np.array([-1.5, 1, -1, 1, -1, 1, 1], dtype=float)
BETA1_B = np.array([0, -1, 1, -1, 1, -1, -1], dtype=float)
ALPHA_B = 0.5 * np.array([2, 1, 1, 1, 1, -2, -2], dtype=float)
ETA_B = 0.25 * np.array([-4, 1, 1, 1, 1, 1, -1, -1], dtype=float)
PATTERNS_B = ((1, 1), (1, 0), (0, 1), (0, 0))

# "stated": coefficients as listed below; "reported": X1, X2 centred at 0 and the
# two outcome coefficient vectors exchanged, which reproduces tau = -0.5
B_VARIANTS = {
    "stated": {"x12_mean": 1.0, "beta0": BETA0_B, "beta1": BETA1_B},
    "reported": {"x12_mean": 0.0, "beta0": BETA1_B, "beta1": BETA0_B},
}


def scenario_a_mechanism(a, x1, x2):
    """Response probability of ``x1`` in scenario A; depends on (A, X) only."""
    return expit(-2.0 + 2.0 * x1 + a * (1.5 + x2))


def generate_scenario_a(n: int, rng: np.random.Generator) -> Tuple[Dataset, float]:
    """One confounder subject to missingness; returns ``(data, true tau)``."""
    x1 = rng.normal(1.0, 1.0, n)
    x2 = rng.binomial(1, 0.5, n).astype(float)
    a = rng.binomial(1, expit(1.25 - 0.5 * x1 - 0.5 * x2))
    y0 = 0.5 + 2.0 * x1 + x2 + rng.standard_normal(n)
    y1 = 3.0 * x1 + 2.0 * x2 + rng.standard_normal(n)
    y = np.where(a == 1, y1, y0)
    r1 = rng.binomial(1, scenario_a_mechanism(a, x1, x2))
    x = np.column_stack([x1, x2])
    r = np.column_stack([r1, np.ones(n, dtype=int)])
    return Dataset(a=a, y=y, x=x, r=r), TAU_A


def scenario_b_pattern_probs(a, x) -> np.ndarray:
    """Pattern probabilities for (R5, R6) in the order 11, 10, 01, 00.

    The three incomplete patterns share ``exp(z'eta) / (1 + 3 exp(z'eta))``
    and the complete pattern takes ``1 / (1 + 3 exp(z'eta))``; the four
    already sum to one, and are renormalized only against rounding.
    """
    z = np.column_stack([np.ones(len(a)), a, x])
    e = np.exp(z @ ETA_B)
    p11 = 1.0 / (1.0 + 3.0 * e)
    pkl = 1.0 / (np.exp(-(z @ ETA_B)) + 3.0)
    probs = np.column_stack([p11, pkl, pkl, pkl])
    return probs / probs.sum(axis=1, keepdims=True)


def _b_variant(variant: str) -> dict:
    try:
        return B_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown scenario-B variant {variant!r}") from None


def scenario_b_true_tau(variant: str = "stated") -> float:
    """Population effect ``E[(1, X)'(beta1 - beta0)]`` by Gauss-Hermite quadrature.

    X5 is normal with mean ``2 * x12_mean`` and variance 5, and
    ``E X6 = E expit(-X5)``.
    """
    v = _b_variant(variant)
    m5 = 2.0 * v["x12_mean"]
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    ex6 = float(np.sum(weights * expit(-(m5 + np.sqrt(5.0) * nodes))) / np.sqrt(2 * np.pi))
    mean_x = np.array([1.0, v["x12_mean"], v["x12_mean"], 0.0, 0.0, m5, ex6])
    return float(mean_x @ (v["beta1"] - v["beta0"]))


def generate_scenario_b_full(n: int, rng: np.random.Generator, variant: str = "stated"):
    """Complete data for scenario B: ``(a, y, x, pattern index)``."""
    v = _b_variant(variant)
    x1 = rng.normal(v["x12_mean"], 1.0, n)
    x2 = rng.normal(v["x12_mean"], 1.0, n)
    x3 = (rng.binomial(1, 0.5, n) - 0.5) / 0.5
    x4 = (rng.binomial(1, 0.5, n) - 0.5) / 0.5
    x5 = x1 + x2 + x3 + x4 + rng.standard_normal(n)
    x6 = rng.binomial(1, expit(-x5)).astype(float)
    x = np.column_stack([x1, x2, x3, x4, x5, x6])
    design = np.column_stack([np.ones(n), x])
    a = rng.binomial(1, expit(design @ ALPHA_B))
    y0 = design @ v["beta0"] + rng.standard_normal(n)
    y1 = design @ v["beta1"] + rng.standard_normal(n)
    y = np.where(a == 1, y1, y0)
    probs = scenario_b_pattern_probs(a, x)
    u = rng.random(n)[:, None]
    k = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), 3)
    return a, y, x, k


def generate_scenario_b(n: int, rng: np.random.Generator,
                        variant: str = "stated") -> Tuple[Dataset, float]:
    """Two confounders (x5, x6) subject to missingness; returns ``(data, tau)``."""
    a, y, x, k = generate_scenario_b_full(n, rng, variant)
    bits = np.array(PATTERNS_B)[k]
    r = np.ones((n, 6), dtype=int)
    r[:, 4:] = bits
    return Dataset(a=a, y=y, x=x, r=r), scenario_b_true_tau(variant)


SCENARIOS = ("A", "B")


def generate(scenario: str, n: int, rng: np.random.Generator, variant: str = "stated"):
    if scenario == "A":
        return generate_scenario_a(n, rng)
    if scenario == "B":
        return generate_scenario_b(n, rng, variant)
    raise ValueError(f"unknown scenario {scenario!r}")


def true_tau(scenario: str, variant: str = "stated") -> float:
    if scenario == "A":
        return TAU_A
    if scenario == "B":
        return scenario_b_true_tau(variant)
    raise ValueError(f"unknown scenario {scenario!r}")


# Monte Carlo driver -------------------------------------------------------


@dataclass
class ScenarioConfig:
    scenario: str = "A"
    n: int = 400
    seed: int = 0
    methods: Tuple[str, ...] = ("unadjusted", "gpsw", "nonpara")
    n_reps: int = 200
    n_boot: int = 100
    J: int = 5
    B: float = 50.0
    M: int = 100
    level: float = 0.95
    variant: str = "stated"
    jobs: int = 1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if self.n_boot < 0:
            raise ValueError("n_boot must be nonnegative")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.scenario == "B" and "nonpara" in self.methods:
            raise ValueError("the nonparametric estimator needs p <= 3; scenario B has p = 6")
        _b_variant(self.variant)


@dataclass
class MethodSummary:
    method: str
    bias: float
    variance: float
    mse: float
    ve: Optional[float]
    coverage: Optional[float]
    reps: int
    failures: int


@dataclass
class MonteCarloReport:
    config: ScenarioConfig
    tau: float
    summaries: Dict[str, MethodSummary]
    estimates: Dict[str, List[Optional[float]]]
    runtime: float = 0.0

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = {
            "config": asdict(self.config),
            "tau": self.tau,
            "methods": {m: asdict(s) for m, s in self.summaries.items()},
            "estimates": self.estimates,
        }
        if include_runtime:
            out["runtime_seconds"] = self.runtime
        return out

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2)

    def rows(self) -> List[dict]:
        out = []
        for m, s in self.summaries.items():
            out.append({"scenario": self.config.scenario, "n": self.config.n, "method": m,
                        "bias": s.bias, "var": s.variance, "mse": s.mse, "ve": s.ve,
                        "coverage": s.coverage, "reps": s.reps, "failures": s.failures})
        return out

    def to_table(self) -> str:
        return format_table(self.rows())


def format_table(rows: Sequence[dict]) -> str:
    """Aligned text table with bias, variance and VE scaled by 100."""
    head = f"{'scenario':<9}{'n':>6}  {'method':<11}{'Bias':>9}{'Var':>9}{'VE':>9}{'Cvg':>7}{'fail':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        ve = "-" if r["ve"] is None else f"{100 * r['ve']:.2f}"
        cvg = "-" if r["coverage"] is None else f"{r['coverage']:.3f}"
        lines.append(
            f"{r['scenario']:<9}{r['n']:>6}  {r['method']:<11}{100 * r['bias']:>9.2f}"
            f"{100 * r['var']:>9.2f}{ve:>9}{cvg:>7}{r['failures']:>6}"
        )
    lines.append("(bias, Var and VE are x 1e-2)")
    return "\n".join(lines)


def _run_rep(cfg: ScenarioConfig, rep: int) -> Dict[str, Optional[dict]]:
    d, _ = generate(cfg.scenario, cfg.n, np.random.default_rng([cfg.seed, rep]), cfg.variant)
    out = {}
    boot_seed = int(np.random.default_rng([cfg.seed, rep, 1]).integers(2**31))
    for method in cfg.methods:
        try:
            res = estimate_with_ci(method, d, n_boot=cfg.n_boot, level=cfg.level,
                                   seed=boot_seed, J=cfg.J, B=cfg.B, M=cfg.M)
            out[method] = {"estimate": res.estimate, "se": res.se,
                           "ci": None if res.ci is None else list(res.ci)}
        except (EstimationError, ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("rep %d, %s failed: %s", rep, method, exc)
            out[method] = None
    return out


def summarize(method: str, records: Sequence[Optional[dict]], tau: float) -> MethodSummary:
    ok = [r for r in records if r is not None]
    failures = len(records) - len(ok)
    if not ok:
        nan = float("nan")
        return MethodSummary(method, nan, nan, nan, None, None, 0, failures)
    est = np.array([r["estimate"] for r in ok])
    bias = float(est.mean() - tau)
    var = float(est.var())
    ve = cover = None
    with_ci = [r for r in ok if r["ci"] is not None]
    if with_ci:
        ve = float(np.mean([r["se"] ** 2 for r in with_ci]))
        cover = float(np.mean([r["ci"][0] <= tau <= r["ci"][1] for r in with_ci]))
    return MethodSummary(method, bias, var, float(np.mean((est - tau) ** 2)), ve, cover,
                         len(ok), failures)


def run_monte_carlo(cfg: ScenarioConfig) -> MonteCarloReport:
    """Repeat generate / estimate / bootstrap and aggregate per method.

    Variance is the population variance of the point estimates, so that
    ``mse = bias**2 + variance``; VE is the mean bootstrap variance.
    """
    start = time.perf_counter()
    tau = true_tau(cfg.scenario, cfg.variant)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_rep, [cfg] * cfg.n_reps, range(cfg.n_reps)))
    else:
        results = [_run_rep(cfg, rep) for rep in range(cfg.n_reps)]
    summaries, estimates = {}, {}
    for method in cfg.methods:
        records = [r[method] for r in results]
        summaries[method] = summarize(method, records, tau)
        estimates[method] = [None if r is None else r["estimate"] for r in records]
    return MonteCarloReport(cfg, tau, summaries, estimates, time.perf_counter() - start)


# tuning sensitivity -------------------------------------------------------

DEFAULT_JB_GRID = ((3, 50.0), (3, 100.0), (5, 50.0), (5, 100.0))


@dataclass
class SensitivityTable:
    cells: Dict[Tuple[int, float, int], dict]

    def mse(self, J: int, B: float, n: int) -> float:
        return self.cells[(J, float(B), n)]["mse"]

    def to_dict(self) -> dict:
        return {f"J={J},B={B:g},n={n}": v for (J, B, n), v in self.cells.items()}

    def to_table(self) -> str:
        sizes = sorted({n for (_, _, n) in self.cells})
        grid = sorted({(J, B) for (J, B, _) in self.cells})
        head = f"{'(J,B)':<10}" + "".join(f"{'n=' + str(n):>10}" for n in sizes)
        lines = [head, "-" * len(head)]
        for J, B in grid:
            lines.append(f"{f'({J},{B:g})':<10}" + "".join(
                f"{1000 * self.cells[(J, B, n)]['mse']:>10.2f}" for n in sizes))
        lines.append("(MSE x 1e-3)")
        return "\n".join(lines)


def _sensitivity_rep(cfg: ScenarioConfig, grid, n: int, rep: int) -> Dict[tuple, Optional[float]]:
    d, _ = generate("A", n, np.random.default_rng([cfg.seed, n, rep]))
    out = {}
    shared = None
    per_J = {}
    for J, B in grid:
        try:
            if J in per_J:
                tuning = per_J[J]
            elif shared is not None:
                # bandwidths of the densities and the outcome smoother do not depend on J
                tuning = {k: v for k, v in shared.items() if k[0] != "H"}
            else:
                tuning = None
            res, fit = nonpara_tau(d, J=J, B=B, tuning=tuning, return_fit=True)
            per_J[J] = fit.tuning()
            shared = shared or per_J[J]
            out[(J, float(B))] = res.estimate
        except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("rep %d (J=%d, B=%g, n=%d) failed: %s", rep, J, B, n, exc)
            out[(J, float(B))] = None
    return out


def sensitivity_grid(cfg: ScenarioConfig, grid=DEFAULT_JB_GRID,
                     sizes: Sequence[int] = (400, 800, 1600)) -> SensitivityTable:
    """MSE of the nonparametric estimator over a (J, B) grid and sample sizes.

    Within a replicate all cells share one dataset; smoothing bandwidths are
    selected once per J and reused across B.
    """
    if cfg.scenario != "A":
        raise ValueError("the sensitivity grid runs on scenario A")
    cells = {}
    for n in sizes:
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                reps = list(pool.map(_sensitivity_rep, [cfg] * cfg.n_reps, [grid] * cfg.n_reps,
                                     [n] * cfg.n_reps, range(cfg.n_reps)))
        else:
            reps = [_sensitivity_rep(cfg, grid, n, rep) for rep in range(cfg.n_reps)]
        for J, B in grid:
            records = [None if r[(J, float(B))] is None
                       else {"estimate": r[(J, float(B))], "se": None, "ci": None} for r in reps]
            s = summarize("nonpara", records, TAU_A)
            cells[(J, float(B), n)] = {"bias": s.bias, "variance": s.variance, "mse": s.mse,
                                       "reps": s.reps, "failures": s.failures}
    return SensitivityTable(cells)
