"""Crash counts over temporal and categorical dimensions."""
from __future__ import annotations

import calendar
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, UnknownDimension
from .ingest import AccidentType, CrashDataset, Light, RoadSurface, Weather

MONTHS = tuple(calendar.month_abbr[1:])
WEEKDAYS = tuple(calendar.day_name)  # Monday..Sunday
DIMENSIONS = (
    "year", "month", "weekday", "hour", "accident_type",
    "milepost_bin", "road_surface", "light", "weather",
)


@dataclass(frozen=True)
class CountTable:
    dimension: str
    bins: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.bins) != len(self.counts):
            raise ValueError("bins and counts differ in length")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.bins, self.counts))

    def __getitem__(self, label: str) -> int:
        return self.counts[self.bins.index(label)]

    def to_csv(self) -> str:
        lines = ["bin,count"] + [f"{b},{c}" for b, c in zip(self.bins, self.counts)]
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "dimension": self.dimension,
            "bins": list(self.bins),
            "counts": list(self.counts),
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2)


def _tally(dimension: str, labels: Sequence[str], values) -> CountTable:
    index = {lab: i for i, lab in enumerate(labels)}
    counts = [0] * len(labels)
    for v in values:
        counts[index[v]] += 1
    return CountTable(dimension, tuple(labels), tuple(counts))


_ENUMS = {
    "accident_type": AccidentType,
    "road_surface": RoadSurface,
    "light": Light,
    "weather": Weather,
}


def dimension_bins(ds: CrashDataset, dimension: str, *, width: float = 0.5) -> tuple[str, ...]:
    """All bin labels for a dimension, including ones with no crashes."""
    if dimension == "year":
        lo, hi = ds.study_years
        return tuple(str(y) for y in range(lo, hi + 1))
    if dimension == "month":
        return MONTHS
    if dimension == "weekday":
        return WEEKDAYS
    if dimension == "hour":
        return tuple(str(h) for h in range(24))
    if dimension == "milepost_bin":
        edges = milepost_bin_edges(ds.corridor_length, width)
        return tuple(f"{_fmt_edge(a)}-{_fmt_edge(b)}" for a, b in zip(edges[:-1], edges[1:]))
    if dimension in _ENUMS:
        return tuple(e.value for e in _ENUMS[dimension])
    raise UnknownDimension(f"unknown dimension {dimension!r}; expected one of {', '.join(DIMENSIONS)}")


def record_labels(ds: CrashDataset, dimension: str, *, width: float = 0.5) -> list[str]:
    """The bin label of every record, in record order."""
    recs = ds.records
    if dimension == "year":
        return [str(r.date.year) for r in recs]
    if dimension == "month":
        return [MONTHS[r.date.month - 1] for r in recs]
    if dimension == "weekday":
        return [WEEKDAYS[r.date.weekday()] for r in recs]
    if dimension == "hour":
        return [str(r.hour) for r in recs]
    if dimension == "milepost_bin":
        bins = dimension_bins(ds, dimension, width=width)
        idx = milepost_bin_index(ds.column("milepost"), ds.corridor_length, width)
        return [bins[i] for i in idx]
    if dimension in _ENUMS:
        return [getattr(r, dimension).value for r in recs]
    raise UnknownDimension(f"unknown dimension {dimension!r}; expected one of {', '.join(DIMENSIONS)}")


def count_by(ds: CrashDataset, dimension: str, *, width: float = 0.5) -> CountTable:
    """Count crashes along one dimension, with explicit zero bins.

    ``width`` is only used for ``milepost_bin``.
    """
    if dimension == "milepost_bin":
        return bin_mileposts(ds, width)
    return _tally(dimension, dimension_bins(ds, dimension), record_labels(ds, dimension))


def milepost_bin_edges(corridor_length: float, width: float) -> np.ndarray:
    if not width > 0:
        raise ValueError("bin width must be positive")
    # tolerance keeps an exact multiple (e.g. 1.0 / 0.5) from growing a sliver bin
    n = max(1, math.ceil(corridor_length / width - 1e-9))
    return np.arange(n + 1) * width


def milepost_bin_index(mileposts, corridor_length: float, width: float) -> np.ndarray:
    """Bin index per milepost: bins are ``[k*w, (k+1)*w)``, the last one closed."""
    n = len(milepost_bin_edges(corridor_length, width)) - 1
    x = np.asarray(mileposts, dtype=float)
    # round before flooring so values like 2.5 stored as 2.4999999 land on the edge
    idx = np.floor(np.round(x / width, 9)).astype(int)
    return np.clip(idx, 0, n - 1)


def _fmt_edge(v: float) -> str:
    return f"{round(float(v), 6):g}"


def bin_mileposts(ds: CrashDataset, width: float) -> CountTable:
    """Histogram of mileposts in bins of ``width`` miles from the corridor origin."""
    edges = milepost_bin_edges(ds.corridor_length, width)
    idx = milepost_bin_index(ds.column("milepost"), ds.corridor_length, width)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    labels = tuple(f"{_fmt_edge(a)}-{_fmt_edge(b)}" for a, b in zip(edges[:-1], edges[1:]))
    return CountTable("milepost_bin", labels, tuple(int(c) for c in counts))


def pearson_correlation(x, y) -> float:
    """Product-moment correlation, dropping pairs where either value is missing."""
    if len(x) != len(y):
        raise DegenerateInput("series differ in length")
    pairs = [
        (float(a), float(b)) for a, b in zip(x, y)
        if a is not None and b is not None and not (isinstance(a, float) and math.isnan(a))
        and not (isinstance(b, float) and math.isnan(b))
    ]
    if len(pairs) < 2:
        raise DegenerateInput("need at least two complete pairs")
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("zero variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))
