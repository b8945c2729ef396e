"""Chi-square and Poisson rate tests plus the tail-probability numerics behind them."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, LengthMismatch, NonPositiveExpected, ZeroExpected

SCHEMA_VERSION = 1

_EPS = 1e-12
_MAX_ITER = 500
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by a modified-Lentz continued fraction."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_p(a: float, x: float) -> float:
    if a <= 0 or x < 0:
        raise DomainError(f"P(a, x) needs a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_continued_fraction(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    if a <= 0 or x < 0:
        raise DomainError(f"Q(a, x) needs a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def chi_square_sf(x: float, df: int) -> float:
    """Upper-tail probability of the chi-square distribution."""
    if df < 1 or int(df) != df:
        raise DomainError(f"df must be a positive integer, got {df}")
    if x < 0 or math.isnan(x):
        raise DomainError(f"x must be >= 0, got {x}")
    if math.isinf(x):
        return 0.0
    return min(1.0, max(0.0, regularized_gamma_q(df / 2.0, x / 2.0)))


def normal_sf(z: float) -> float:
    """Standard normal upper tail, 1 - Phi(z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class Cell:
    label: str
    observed: float
    expected: float
    statistic: float


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    df: int | None
    p_value: float
    alpha: float = 0.05
    contributions: tuple[Cell, ...] = ()
    notes: tuple[str, ...] = ()

    __test__ = False  # keep pytest from collecting this class

    @property
    def reject_null(self) -> bool:
        return self.p_value < self.alpha

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject_null": self.reject_null,
            "contributions": [
                {"cell": c.label, "observed": c.observed, "expected": c.expected, "statistic": c.statistic}
                for c in self.contributions
            ],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2)


def format_p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def chi_square_gof(
    observed,
    expected: Sequence[float] | None = None,
    *,
    alpha: float = 0.05,
    labels: Sequence[str] | None = None,
    name: str = "chi-square goodness of fit",
) -> TestResult:
    """Pearson goodness-of-fit test, no continuity correction.

    ``observed`` is a :class:`~crashlab.descriptive.CountTable` or a plain
    sequence of counts.  ``expected`` may be counts or proportions; anything
    not summing to the observed total is rescaled to it.  ``None`` means
    uniform.
    """
    if hasattr(observed, "counts"):
        labels = labels or observed.bins
        observed = observed.counts
    obs = np.asarray(observed, dtype=float)
    k = obs.size
    if k < 2:
        raise LengthMismatch("need at least two cells")
    total = obs.sum()
    if expected is None:
        exp = np.full(k, total / k)
    else:
        exp = np.asarray(expected, dtype=float)
        if exp.size != k:
            raise LengthMismatch(f"{k} observed cells but {exp.size} expected")
        if np.any(exp <= 0):
            raise ZeroExpected(f"expected values must be positive: {exp.tolist()}")
        if not math.isclose(exp.sum(), total, rel_tol=1e-9):
            exp = exp * (total / exp.sum())
    if np.any(exp <= 0):
        raise ZeroExpected("expected values must be positive")
    cells_stat = (obs - exp) ** 2 / exp
    labels = list(labels) if labels is not None else [str(i) for i in range(k)]
    cells = tuple(Cell(str(l), float(o), float(e), float(s)) for l, o, e, s in zip(labels, obs, exp, cells_stat))
    stat = float(cells_stat.sum())
    df = k - 1
    return TestResult(name, stat, df, chi_square_sf(stat, df), alpha, cells)


@dataclass(frozen=True)
class ContingencyTable:
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (len(self.row_labels), len(self.col_labels)):
            raise LengthMismatch("counts shape does not match labels")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if counts.sum() <= 0:
            raise ValueError("grand total must be positive")
        object.__setattr__(self, "counts", counts)

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def grand_total(self) -> float:
        return float(self.counts.sum())

    @classmethod
    def from_pairs(cls, rows: Sequence[str], cols: Sequence[str], row_labels=None, col_labels=None):
        """Cross-tabulate two parallel label sequences."""
        row_labels = tuple(row_labels or sorted(set(rows)))
        col_labels = tuple(col_labels or sorted(set(cols)))
        ri = {l: i for i, l in enumerate(row_labels)}
        ci = {l: i for i, l in enumerate(col_labels)}
        counts = np.zeros((len(row_labels), len(col_labels)))
        for r, c in zip(rows, cols):
            counts[ri[r], ci[c]] += 1
        return cls(row_labels, col_labels, counts)

    def to_json_obj(self) -> dict:
        return {
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "counts": self.counts.astype(int).tolist(),
        }


def chi_square_independence(
    table: ContingencyTable, *, alpha: float = 0.05, name: str = "chi-square independence"
) -> TestResult:
    expected = np.outer(table.row_totals, table.col_totals) / table.grand_total
    bad = np.argwhere(expected <= 0)
    if bad.size:
        i, j = bad[0]
        raise ZeroExpected(
            f"expected count is zero in cell ({table.row_labels[i]}, {table.col_labels[j]}); "
            "merge sparse categories before testing"
        )
    cells_stat = (table.counts - expected) ** 2 / expected
    cells = tuple(
        Cell(f"{table.row_labels[i]}|{table.col_labels[j]}", float(table.counts[i, j]),
             float(expected[i, j]), float(cells_stat[i, j]))
        for i in range(len(table.row_labels)) for j in range(len(table.col_labels))
    )
    stat = float(cells_stat.sum())
    df = (len(table.row_labels) - 1) * (len(table.col_labels) - 1)
    if df < 1:
        raise LengthMismatch("independence test needs at least a 2x2 table")
    return TestResult(name, stat, df, chi_square_sf(stat, df), alpha, cells)


def poisson_rate_test(observed: float, expected: float, *, alpha: float = 0.05) -> TestResult:
    """Normal-approximation test of an observed count against a Poisson expectation.

    Two-sided p-value.  ``df`` is ``None`` since this is a Z test.
    """
    if not expected > 0:
        raise NonPositiveExpected(f"expected must be positive, got {expected}")
    z = (observed - expected) / math.sqrt(expected)
    p = min(1.0, 2.0 * normal_sf(abs(z)))
    cell = Cell("total", float(observed), float(expected), float(z))
    return TestResult("poisson rate test", float(z), None, p, alpha, (cell,))
