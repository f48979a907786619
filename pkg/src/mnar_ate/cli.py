"""Command-line front end: ``mnar-ate {simulate,estimate,identify,sensitivity}``.

Settings come from an optional JSON config with flat (optionally dotted)
keys, overridden by flags. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import DataError, load_csv
from .discrete import DiscreteJoint, identify
from .estimators import MAX_NONPARA_P, METHODS, EstimationError, estimate_with_ci
from .parametric import ConvergenceError
from .simulation import (
    DEFAULT_JB_GRID,
    ScenarioConfig,
    run_monte_carlo,
    sensitivity_grid,
)

logger = logging.getLogger("mnar_ate")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MAX_DISCRETE_LEVELS = 20
METHOD_ALIASES = {"unadj": "unadjusted", "ps": "gpsw", "np": "nonpara", "fi": "para"}
FORMATS = ("json", "table", "csv")

# config key -> resolved setting; dotted keys only group settings
CONFIG_KEYS = {
    "scenario": "scenario", "data": "data", "dataset": "data", "methods": "methods",
    "method": "methods", "n": "n", "reps": "reps", "n_reps": "reps", "boot": "boot",
    "n_boot": "boot", "seed": "seed", "jobs": "jobs", "J": "J", "B": "B", "M": "M",
    "level": "level", "variant": "variant", "out": "out", "output": "out", "path": "out",
    "format": "format", "tol": "tol", "sizes": "sizes",
}
DEFAULTS = {
    "scenario": None, "data": None, "methods": None, "n": 400, "reps": 200, "boot": 100,
    "seed": None, "jobs": None, "J": 5, "B": 50.0, "M": 100, "level": 0.95,
    "variant": "stated", "out": None, "format": "json", "tol": 1e-10,
    "sizes": [400, 800, 1600],
}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def _flatten(obj: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for key, value in obj.items():
        name = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            out.update(_flatten(value, name))
        else:
            out[name] = value
    return out


def load_config(path: Optional[str]) -> Dict[str, object]:
    """Read a JSON config and map its keys onto setting names."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    resolved = {}
    for key, value in _flatten(raw).items():
        leaf = key.rsplit(".", 1)[-1]
        if leaf not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        resolved[CONFIG_KEYS[leaf]] = value
    return resolved


def parse_methods(value) -> List[str]:
    items = value.split(",") if isinstance(value, str) else list(value)
    methods = []
    for item in items:
        name = METHOD_ALIASES.get(str(item).strip(), str(item).strip())
        if name not in METHODS:
            raise UsageError(f"unknown method {item!r}; choose from {', '.join(METHODS)}")
        if name not in methods:
            methods.append(name)
    if not methods:
        raise UsageError("no methods given")
    return methods


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Defaults, then config file, then flags; seed falls back to ``MNAR_SEED``."""
    settings = dict(DEFAULTS)
    settings.update(load_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["seed"] is None and os.environ.get("MNAR_SEED"):
        try:
            settings["seed"] = int(os.environ["MNAR_SEED"])
        except ValueError:
            raise UsageError("MNAR_SEED must be an integer")
    if settings["jobs"] is None:
        settings["jobs"] = os.cpu_count() or 1
    if settings["format"] not in FORMATS:
        raise UsageError(f"format must be one of {FORMATS}")
    try:
        for key in ("n", "reps", "boot", "jobs", "J", "M"):
            settings[key] = int(settings[key])
        for key in ("B", "level", "tol"):
            settings[key] = float(settings[key])
        if settings["seed"] is not None:
            settings["seed"] = int(settings["seed"])
        settings["sizes"] = [int(v) for v in settings["sizes"]]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid numeric setting: {exc}")
    if settings["methods"] is not None:
        settings["methods"] = parse_methods(settings["methods"])
    return settings


def _csv_text(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _render(fmt: str, payload: dict, table: str, rows: Sequence[dict]) -> str:
    if fmt == "json":
        return json.dumps(payload, indent=2)
    if fmt == "table":
        return table
    return _csv_text(rows)


def _require_seed(settings) -> int:
    if settings["seed"] is None:
        raise UsageError("a seed is required: pass --seed, set it in the config or export MNAR_SEED")
    return settings["seed"]


def cmd_simulate(settings) -> int:
    if settings["data"] is not None:
        raise UsageError("simulate takes --scenario, not --data")
    if settings["scenario"] is None:
        raise UsageError("simulate needs --scenario A or B")
    seed = _require_seed(settings)
    methods = settings["methods"] or (["unadjusted", "gpsw", "nonpara"]
                                      if settings["scenario"] == "A" else ["unadjusted", "para"])
    try:
        cfg = ScenarioConfig(scenario=settings["scenario"], n=settings["n"], seed=seed,
                             methods=tuple(methods), n_reps=settings["reps"],
                             n_boot=settings["boot"], J=settings["J"], B=settings["B"],
                             M=settings["M"], level=settings["level"],
                             variant=settings["variant"], jobs=settings["jobs"])
    except ValueError as exc:
        raise UsageError(str(exc))
    report = run_monte_carlo(cfg)
    logger.info("simulation finished in %.1f s", report.runtime)
    # runtime is left out so that reruns are byte-identical
    resolved = {k: v for k, v in settings.items() if k != "jobs"}
    payload = {"settings": resolved, "report": report.to_dict(include_runtime=False)}
    _emit(_render(settings["format"], payload, report.to_table(), report.rows()), settings["out"])
    if settings["out"] is not None and settings["format"] == "json":
        _emit(report.to_table(), str(Path(settings["out"]).with_suffix(".txt")))
    return EXIT_OK


def cmd_sensitivity(settings) -> int:
    if settings["scenario"] not in (None, "A"):
        raise UsageError("the sensitivity grid runs on scenario A only")
    seed = _require_seed(settings)
    try:
        cfg = ScenarioConfig(scenario="A", n=min(settings["sizes"]), seed=seed,
                             methods=("nonpara",), n_reps=settings["reps"], n_boot=0,
                             jobs=settings["jobs"])
    except ValueError as exc:
        raise UsageError(str(exc))
    table = sensitivity_grid(cfg, DEFAULT_JB_GRID, sizes=settings["sizes"])
    rows = [{"J": J, "B": B, "n": n, **cell} for (J, B, n), cell in table.cells.items()]
    resolved = {k: v for k, v in settings.items() if k != "jobs"}
    payload = {"settings": resolved, "cells": table.to_dict()}
    _emit(_render(settings["format"], payload, table.to_table(), rows), settings["out"])
    return EXIT_OK


def _load(settings):
    if settings["scenario"] is not None:
        raise UsageError("this command takes --data, not --scenario")
    if settings["data"] is None:
        raise UsageError("--data PATH is required")
    try:
        return load_csv(settings["data"])
    except FileNotFoundError:
        raise UsageError(f"{settings['data']}: no such file")
    except DataError as exc:
        raise UsageError(f"{settings['data']}: {exc}")


def cmd_estimate(settings) -> int:
    d = _load(settings)
    methods = settings["methods"] or ["unadjusted", "gpsw", "nonpara" if d.p <= MAX_NONPARA_P else "para"]
    if "nonpara" in methods and d.p > MAX_NONPARA_P:
        raise UsageError(f"nonpara supports at most {MAX_NONPARA_P} covariates; "
                         f"this file has {d.p}, use para")
    seed = settings["seed"] if settings["seed"] is not None else 0
    results = [estimate_with_ci(m, d, n_boot=settings["boot"], level=settings["level"],
                                seed=seed, J=settings["J"], B=settings["B"], M=settings["M"])
               for m in methods]
    rows = [{"method": r.method, "estimate": r.estimate, "se": r.se,
             "ci_lo": None if r.ci is None else r.ci[0],
             "ci_hi": None if r.ci is None else r.ci[1]} for r in results]
    table = "\n".join(
        f"{r['method']:<11}{r['estimate']:>10.4f}"
        + ("" if r["se"] is None else f"  se {r['se']:.4f}  [{r['ci_lo']:.4f}, {r['ci_hi']:.4f}]")
        for r in rows
    )
    resolved = {k: v for k, v in settings.items() if k != "jobs"}
    resolved["seed"] = seed
    payload = {"settings": resolved, "n": d.n, "p": d.p,
               "results": [r.to_dict() for r in results]}
    _emit(_render(settings["format"], payload, table, rows), settings["out"])
    return EXIT_OK


def cmd_identify(settings) -> int:
    d = _load(settings)
    try:
        joint = DiscreteJoint.from_dataset(d, max_levels=MAX_DISCRETE_LEVELS)
    except ValueError as exc:
        raise UsageError(str(exc))
    report = identify(joint, tol=settings["tol"])
    rows = [{"arm": int(a), "rank": rk, "q": report["q"], "K": report["K"],
             "identifiable": report["identifiable"]} for a, rk in report["ranks"].items()]
    ranks = ", ".join(f"arm {a}: {rk}" for a, rk in report["ranks"].items())
    lines = [f"identifiable: {report['identifiable']}",
             f"ranks: {ranks} (q = {report['q']}, K = {report['K']})"]
    if report["reason"]:
        lines.append(f"reason: {report['reason']}")
    if "tau" in report:
        lines.append(f"tau: {report['tau']:.10g}  tau_att: {report['tau_att']:.10g}")
    payload = {"settings": {k: v for k, v in settings.items() if k != "jobs"}, "report": report}
    _emit(_render(settings["format"], payload, "\n".join(lines), rows), settings["out"])
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "identify": cmd_identify,
            "sensitivity": cmd_sensitivity}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--scenario", choices=("A", "B"))
    common.add_argument("--data", help="CSV with columns a, y, x1..xp")
    common.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    common.add_argument("--n", type=int, help="sample size per replicate")
    common.add_argument("--reps", type=int, help="Monte Carlo replicates")
    common.add_argument("--boot", type=int, help="bootstrap replicates (0 disables)")
    common.add_argument("--seed", type=int, help="master seed (fallback: MNAR_SEED)")
    common.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    common.add_argument("--J", type=int, help="Hermite basis size")
    common.add_argument("--B", type=float, help="bound on the series coefficients")
    common.add_argument("--M", type=int, help="imputations per incomplete unit")
    common.add_argument("--level", type=float, help="confidence level")
    common.add_argument("--variant", choices=("stated", "reported"),
                        help="scenario B generator variant")
    common.add_argument("--tol", type=float, help="relative rank tolerance for identify")
    common.add_argument("--sizes", type=lambda s: [int(v) for v in s.split(",")],
                        help="sample sizes for the sensitivity grid")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=FORMATS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="mnar-ate",
        description="Treatment effects with confounders missing not at random.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="Monte Carlo study on a built-in scenario")
    sub.add_parser("estimate", parents=[common], help="estimate the effect on a CSV dataset")
    sub.add_parser("identify", parents=[common], help="rank check and exact effect on discrete data")
    sub.add_parser("sensitivity", parents=[common], help="MSE over the (J, B) grid on scenario A")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, ConvergenceError, RuntimeError, ValueError,
            np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
