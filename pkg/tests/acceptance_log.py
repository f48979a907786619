"""Per-criterion results gathered while the acceptance tests run."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

TITLES = {
    1: "discrete round trip",
    2: "non-identifiable detection",
    3: "scenario A Monte Carlo table",
    4: "scenario B Monte Carlo table",
    5: "tuning grid MSE ordering",
    6: "constrained solver KKT",
    7: "fractional imputation ascent and scores",
    8: "reduction identities",
    9: "generator calibration",
}

SRC = Path(__file__).resolve().parent.parent / "src" / "mnar_ate"
CACHE = Path(os.environ.get("MNAR_ACCEPTANCE_CACHE",
                            Path(__file__).resolve().parent / ".acceptance_cache"))


class Log:
    def __init__(self):
        self.parts = {}

    def record(self, criterion: int, name: str, ok: bool, detail: str) -> bool:
        self.parts.setdefault(criterion, []).append((name, bool(ok), detail))
        return ok

    def lines(self):
        out = []
        for k in sorted(TITLES):
            parts = self.parts.get(k)
            if not parts:
                out.append(f"NOT RUN  criterion {k}: {TITLES[k]}")
                continue
            status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
            body = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({detail})"
                             for name, ok, detail in parts)
            out.append(f"{status}  criterion {k}: {TITLES[k]}: {body}")
        return out


LOG = Log()


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def cached(name: str, config: dict, compute):
    """Result of ``compute()``, reused while the package source and config are unchanged.

    Set MNAR_ACCEPTANCE_CACHE=off to always recompute.
    """
    if str(CACHE) == "off":
        return compute(), False
    key = hashlib.sha256(json.dumps([source_digest(), config], sort_keys=True).encode())
    path = CACHE / f"{name}-{key.hexdigest()[:16]}.json"
    if path.exists():
        return json.loads(path.read_text()), True
    value = compute()
    CACHE.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value))
    return value, False
