"""Partially observed causal data: containers, missingness patterns and CSV I/O.

A :class:`Dataset` holds ``n`` units of (treatment ``a``, outcome ``y``,
covariates ``x``) together with the presence mask ``r`` (1 = observed).
Absent covariate cells are stored as NaN in ``x`` so that any accidental use
propagates loudly; the mask ``r`` is the authoritative record of presence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

MISSING_TOKENS = frozenset({"", "NA"})


class DataError(ValueError):
    """Invalid data: bad values, schema mismatch or parse failure."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    a: np.ndarray
    y: np.ndarray
    x: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        r = np.asarray(self.r)
        if x.ndim == 1:
            x = x[:, None]
        if r.ndim == 1:
            r = r[:, None]
        if a.ndim != 1 or y.ndim != 1 or x.ndim != 2 or r.ndim != 2:
            raise DataError("a, y must be vectors and x, r tables")
        n = a.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one unit")
        if y.shape[0] != n or x.shape[0] != n or r.shape != x.shape:
            raise DataError(
                f"inconsistent shapes: a{a.shape}, y{y.shape}, x{x.shape}, r{r.shape}"
            )
        if x.shape[1] < 1:
            raise DataError("need at least one covariate column")
        if not np.all(np.isin(a, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(a, (0, 1)))[0])
            raise DataError(f"treatment must be 0/1 (unit {bad} has {a[bad]!r})")
        if not np.all(np.isfinite(y)):
            raise DataError("outcome contains missing or non-finite values")
        if not np.all(np.isin(r, (0, 1))):
            raise DataError("missingness indicators must be 0/1")
        r = r.astype(np.int8)
        present = r == 1
        if np.any(~np.isfinite(x[present])):
            raise DataError("observed covariate cell is missing or non-finite")
        x = np.where(present, x, np.nan)
        object.__setattr__(self, "a", _frozen(a.astype(np.int8)))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "r", _frozen(r))

    @classmethod
    def from_arrays(cls, a, y, x, r=None) -> "Dataset":
        """Build a dataset; when ``r`` is omitted, NaN cells of ``x`` are missing."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if r is None:
            r = (~np.isnan(x)).astype(np.int8)
        return cls(a=a, y=y, x=x, r=r)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def complete(self) -> np.ndarray:
        """Boolean mask of complete cases."""
        return np.all(self.r == 1, axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(a=self.a[idx], y=self.y[idx], x=self.x[idx], r=self.r[idx])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.a, other.a)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.x, other.x, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True, order=True)
class Pattern:
    bits: Tuple[int, ...]
    obs_idx: Tuple[int, ...] = field(init=False, compare=False)
    mis_idx: Tuple[int, ...] = field(init=False, compare=False)

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"pattern bits must be 0/1, got {self.bits}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "obs_idx", tuple(j for j, b in enumerate(bits) if b))
        object.__setattr__(self, "mis_idx", tuple(j for j, b in enumerate(bits) if not b))

    @classmethod
    def complete_pattern(cls, p: int) -> "Pattern":
        return cls((1,) * p)

    @property
    def p(self) -> int:
        return len(self.bits)

    @property
    def is_complete(self) -> bool:
        return not self.mis_idx

    def label(self) -> str:
        return "".join(map(str, self.bits))


@dataclass(frozen=True)
class PatternIndex:
    groups: Dict[Pattern, np.ndarray]
    complete: Pattern

    def patterns(self) -> List[Pattern]:
        """Patterns present in the data, complete pattern first."""
        rest = sorted((q for q in self.groups if q != self.complete), reverse=True)
        head = [self.complete] if self.complete in self.groups else []
        return head + rest

    def incomplete_patterns(self) -> List[Pattern]:
        return [q for q in self.patterns() if not q.is_complete]

    def members(self, pat: Pattern) -> np.ndarray:
        return self.groups.get(pat, np.empty(0, dtype=np.intp))

    def sizes(self) -> Dict[Pattern, int]:
        return {q: len(v) for q, v in self.groups.items()}


def index_patterns(d: Dataset) -> PatternIndex:
    rows, inverse = np.unique(d.r, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    groups = {}
    for k, row in enumerate(rows):
        groups[Pattern(tuple(row))] = np.flatnonzero(inverse == k)
    return PatternIndex(groups=groups, complete=Pattern.complete_pattern(d.p))


def split_by_pattern(d: Dataset, pat: Pattern) -> Tuple[np.ndarray, np.ndarray]:
    """Observed sub-columns and the missing-cell mask for units in ``pat``.

    Returns ``(x_obs, mis_mask)`` where ``x_obs`` has shape
    ``(group size, len(pat.obs_idx))``. A pattern absent from ``d`` yields
    empty tables.
    """
    if pat.p != d.p:
        raise ValueError(f"pattern length {pat.p} does not match p={d.p}")
    rows = np.flatnonzero(np.all(d.r == np.asarray(pat.bits), axis=1))
    x_obs = d.x[np.ix_(rows, pat.obs_idx)]
    mis_mask = np.zeros((len(rows), d.p), dtype=bool)
    mis_mask[:, list(pat.mis_idx)] = True
    return x_obs, mis_mask


def default_columns(p: int) -> List[str]:
    return ["a", "y"] + [f"x{j + 1}" for j in range(p)]


def _parse_float(token: str, line: int, col: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {token!r} as a number", line)
    if not math.isfinite(value):
        raise ParseError(f"column {col!r}: non-finite value {token!r}", line)
    return value


def load_csv(path, columns: Optional[Sequence[str]] = None) -> Dataset:
    """Read a dataset from a CSV file with columns ``a, y, x1..xp``.

    ``columns`` optionally fixes the expected header. Empty cells and ``NA``
    in covariate columns are missing; in ``a`` or ``y`` they are an error.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        for required in ("a", "y"):
            if required not in header:
                raise SchemaError(f"{path}: missing required column {required!r}")
        xcols = [h for h in header if h not in ("a", "y")]
        unknown = [h for h in xcols if not (h.startswith("x") and h[1:].isdigit())]
        if unknown:
            raise SchemaError(f"{path}: unknown column(s) {unknown}")
        xcols.sort(key=lambda h: int(h[1:]))
        expected = [f"x{j + 1}" for j in range(len(xcols))]
        if not xcols or xcols != expected:
            raise SchemaError(f"{path}: covariate columns must be x1..xp, got {xcols}")
        if columns is not None and set(columns) != set(header):
            raise SchemaError(f"{path}: header {header} does not match schema {list(columns)}")
        pos = {h: k for k, h in enumerate(header)}
        a, y, x = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            row = [c.strip() for c in row]
            tok_a, tok_y = row[pos["a"]], row[pos["y"]]
            if tok_a in MISSING_TOKENS or tok_y in MISSING_TOKENS:
                raise DataError(f"line {line}: treatment and outcome must be observed")
            val_a = _parse_float(tok_a, line, "a")
            if val_a not in (0.0, 1.0):
                raise DataError(f"line {line}: treatment must be 0 or 1, got {tok_a!r}")
            a.append(int(val_a))
            y.append(_parse_float(tok_y, line, "y"))
            x.append([
                math.nan if row[pos[c]] in MISSING_TOKENS else _parse_float(row[pos[c]], line, c)
                for c in xcols
            ])
    if not a:
        raise DataError(f"{path}: no data rows")
    return Dataset.from_arrays(np.array(a), np.array(y), np.array(x))


def write_csv(d: Dataset, path) -> None:
    """Write ``d`` so that :func:`load_csv` reproduces it exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(default_columns(d.p))
        for i in range(d.n):
            cells = [repr(float(v)) if d.r[i, j] else "" for j, v in enumerate(d.x[i])]
            writer.writerow([int(d.a[i]), repr(float(d.y[i]))] + cells)
