"""HSM safety performance functions for a rural two-lane segment and its
minor-road stop-controlled (4ST) intersections, plus predicted-vs-observed tests."""
from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, LengthMismatch, NonPositiveExpected
from .inferential import SCHEMA_VERSION, Cell, TestResult, chi_square_sf, format_p, poisson_rate_test

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SEGMENT_SHIFT = -0.312
INT_A = -9.025
INT_B = 0.409
INT_C = 0.718


def spf_segment(aadt: float, length: float) -> float:
    """Crashes/year on a rural two-lane segment: AADT * L * 365e-6 * exp(-0.312)."""
    if not aadt > 0 or not length > 0:
        raise DomainError(f"aadt and length must be positive (got {aadt}, {length})")
    return aadt * length * 365e-6 * math.exp(SEGMENT_SHIFT)


def spf_intersection_4st(aadt_major: float, aadt_minor: float) -> float:
    if not aadt_major > 0 or not aadt_minor > 0:
        raise DomainError(f"AADTs must be positive (got {aadt_major}, {aadt_minor})")
    return math.exp(INT_A + INT_B * math.log(aadt_major) + INT_C * math.log(aadt_minor))


@dataclass(frozen=True)
class Intersection:
    name: str
    aadt_minor: float


@dataclass(frozen=True)
class CorridorSpec:
    aadt_major: float
    segment_length: float
    study_years: int
    intersections: tuple[Intersection, ...] = ()
    calibration_factor: float = 1.0
    cmf_product: float = 1.0

    def __post_init__(self):
        if not self.aadt_major > 0:
            raise DomainError("aadt_major must be positive")
        if not self.segment_length > 0:
            raise DomainError("segment_length must be positive")
        if int(self.study_years) != self.study_years or self.study_years < 1:
            raise DomainError("study_years must be a positive integer")
        if not self.calibration_factor > 0 or not self.cmf_product > 0:
            raise DomainError("calibration_factor and cmf_product must be positive")
        for x in self.intersections:
            if not x.aadt_minor > 0:
                raise DomainError(f"intersection {x.name!r}: aadt_minor must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorridorSpec":
        allowed = {"aadt_major", "segment_length", "study_years", "intersections",
                   "calibration_factor", "cmf_product"}
        extra = set(d) - allowed
        if extra:
            raise DomainError(f"unknown corridor fields: {sorted(extra)}")
        missing = {"aadt_major", "segment_length", "study_years"} - set(d)
        if missing:
            raise DomainError(f"missing corridor fields: {sorted(missing)}")
        xs = tuple(Intersection(str(i["name"]), float(i["aadt_minor"])) for i in d.get("intersections", ()))
        return cls(float(d["aadt_major"]), float(d["segment_length"]), int(d["study_years"]), xs,
                   float(d.get("calibration_factor", 1.0)), float(d.get("cmf_product", 1.0)))

    def to_dict(self) -> dict:
        return {
            "aadt_major": self.aadt_major,
            "segment_length": self.segment_length,
            "study_years": self.study_years,
            "intersections": [{"name": x.name, "aadt_minor": x.aadt_minor} for x in self.intersections],
            "calibration_factor": self.calibration_factor,
            "cmf_product": self.cmf_product,
        }


def load_corridor(path: str | Path | None = None) -> CorridorSpec:
    """Read a corridor from JSON or TOML (by suffix); ``None`` gives the bundled one."""
    if path is None:
        text = resources.files("crashlab.data").joinpath("corridor.json").read_text()
        return CorridorSpec.from_dict(json.loads(text))
    path = Path(path)
    if path.suffix.lower() == ".toml":
        return CorridorSpec.from_dict(tomllib.loads(path.read_text()))
    return CorridorSpec.from_dict(json.loads(path.read_text()))


def cell_chi_square(
    observed: Sequence[float], expected: Sequence[float], labels: Sequence[str] | None = None,
    *, alpha: float = 0.05, name: str = "chi-square predicted vs observed",
) -> TestResult:
    """Sum of (O-E)^2/E over cells whose expectations come from an external model.

    Nothing is fitted to the observed data, so df equals the number of cells.
    """
    obs = np.asarray(observed, dtype=float)
    exp = np.asarray(expected, dtype=float)
    if obs.shape != exp.shape or obs.ndim != 1 or obs.size == 0:
        raise LengthMismatch("observed and expected must be equal-length, nonempty")
    if np.any(exp <= 0):
        raise NonPositiveExpected("expected cells must be positive")
    labels = list(labels) if labels is not None else [str(i) for i in range(obs.size)]
    parts = (obs - exp) ** 2 / exp
    cells = tuple(Cell(l, float(o), float(e), float(s)) for l, o, e, s in zip(labels, obs, exp, parts))
    stat = float(parts.sum())
    return TestResult(name, stat, obs.size, chi_square_sf(stat, obs.size), alpha, cells)


@dataclass(frozen=True)
class SpfPrediction:
    spec: CorridorSpec
    segment_per_year: float
    intersections_per_year: dict[str, float]
    computed_total: float
    expected_total: float  # what the tests compare against (override or computed)
    observed_total: float
    tests: tuple[TestResult, ...] = field(default=())

    @property
    def per_year(self) -> float:
        return self.segment_per_year + sum(self.intersections_per_year.values())

    @property
    def overridden(self) -> bool:
        return self.expected_total != self.computed_total

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "corridor": self.spec.to_dict(),
            "segment_per_year": self.segment_per_year,
            "intersections_per_year": dict(self.intersections_per_year),
            "computed_total": self.computed_total,
            "expected_total": self.expected_total,
            "expected_overridden": self.overridden,
            "observed_total": self.observed_total,
            "tests": [t.to_json_obj() for t in self.tests],
        }

    def to_markdown(self) -> str:
        s = self.spec
        f = s.calibration_factor * s.cmf_product * s.study_years
        lines = [
            "| Component | Crashes/yr | Over study period |",
            "|---|---|---|",
            f"| Segment ({s.segment_length:g} mi, AADT {s.aadt_major:g}) | {self.segment_per_year:.2f} | "
            f"{self.segment_per_year * f:.1f} |",
        ]
        for name, v in self.intersections_per_year.items():
            lines.append(f"| {name} (4ST) | {v:.3f} | {v * f:.1f} |")
        lines.append(f"| Computed total | {self.per_year:.2f} | {self.computed_total:.1f} |")
        lines.append("")
        if self.overridden:
            lines.append(f"Comparison uses an expected total of {self.expected_total:g} "
                         f"in place of the computed {self.computed_total:.1f}.")
            lines.append("")
        lines.append(f"Observed: {self.observed_total:g}, expected: {self.expected_total:g}")
        lines.append("")
        lines.append("| Test | Statistic | df | p |")
        lines.append("|---|---|---|---|")
        for t in self.tests:
            df = "-" if t.df is None else str(t.df)
            lines.append(f"| {t.name} | {t.statistic:.2f} | {df} | {format_p(t.p_value)} |")
        return "\n".join(lines) + "\n"


def predict_corridor(
    spec: CorridorSpec,
    observed: float,
    *,
    expected_override: float | None = None,
    observed_by_year: Sequence[float] | None = None,
    alpha: float = 0.05,
) -> SpfPrediction:
    """Predict corridor crashes and compare against the observed count.

    Always runs a Poisson rate Z test and a one-cell chi-square on the totals.
    With ``observed_by_year`` the chi-square is repeated over per-year cells,
    each expecting ``expected_total / study_years``.
    """
    if observed < 0:
        raise DomainError("observed must be >= 0")
    seg = spf_segment(spec.aadt_major, spec.segment_length)
    ints = {x.name: spf_intersection_4st(spec.aadt_major, x.aadt_minor) for x in spec.intersections}
    per_year = seg + sum(ints.values())
    total = spec.study_years * per_year * spec.calibration_factor * spec.cmf_product
    expected = float(expected_override) if expected_override is not None else total
    if not expected > 0:
        raise NonPositiveExpected("expected total must be positive")
    tests = [
        poisson_rate_test(observed, expected, alpha=alpha),
        cell_chi_square([observed], [expected], ["total"], alpha=alpha, name="chi-square (total)"),
    ]
    if observed_by_year is not None:
        k = len(observed_by_year)
        if k != spec.study_years:
            raise LengthMismatch(f"{k} yearly counts for a {spec.study_years}-year study")
        tests.append(cell_chi_square(observed_by_year, [expected / k] * k,
                                     [f"year {i + 1}" for i in range(k)], alpha=alpha,
                                     name="chi-square (per year)"))
    return SpfPrediction(spec, seg, ints, total, expected, float(observed), tuple(tests))
