"""Seeded synthetic crash corpus with exactly prescribed marginals.

The raw corridor records are not public, so downstream statistics are
exercised on a generated corpus whose one-way tables (year, month, weekday,
hour, type, 0.5-mile milepost bins, surface, light, weather, alcohol) equal
the published figures exactly.  Marginal counts are fixed by deterministic
allocation; only the pairing of attributes across records is random.  A few
joint signals are planted on purpose:

* rear-end crashes lean dry, fixed-object / run-off-road crashes lean wet;
* darkness and alcohol lean toward night hours;
* injury odds rise near the two major intersections and at night;
* damage follows a log-linear mean with gamma noise, rescaled so the
  variance-to-mean ratio hits a target.
"""
from __future__ import annotations

import calendar
import json
import math
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .descriptive import MONTHS, WEEKDAYS, count_by, milepost_bin_edges
from .errors import InconsistentMarginals
from .ingest import (
    AccidentType,
    CrashDataset,
    CrashRecord,
    Light,
    RoadSurface,
    Weather,
)

_MARGINAL_DIMS = ("year", "month", "weekday", "hour", "accident_type", "road_surface", "light", "weather")


@dataclass(frozen=True)
class MarginalSpec:
    n: int
    corridor_length: float
    study_years: tuple[int, int]
    year: Mapping[str, int]
    month: Mapping[str, int]
    weekday: Mapping[str, int]
    hour: Mapping[str, int]
    accident_type: Mapping[str, int]
    milepost_width: float
    milepost_bins: tuple[int, ...]
    milepost_spikes: Mapping[str, float]
    road_surface: Mapping[str, int]
    light: Mapping[str, int]
    weather: Mapping[str, int]
    alcohol: int
    num_vehicles_total: int | None = None
    provenance: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MarginalSpec":
        d = dict(d)
        d["study_years"] = tuple(d["study_years"])
        d["milepost_bins"] = tuple(int(c) for c in d["milepost_bins"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["study_years"] = list(self.study_years)
        out["milepost_bins"] = list(self.milepost_bins)
        return {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in out.items()}

    def totals(self) -> dict[str, int]:
        t = {dim: sum(getattr(self, dim).values()) for dim in _MARGINAL_DIMS}
        t["milepost_bins"] = sum(self.milepost_bins)
        return t

    def check(self) -> None:
        bad = {k: v for k, v in self.totals().items() if v != self.n}
        if bad:
            raise InconsistentMarginals(f"marginals must each sum to n={self.n}; got {bad}")
        if not 0 <= self.alcohol <= self.n:
            raise InconsistentMarginals("alcohol count outside [0, n]")
        nbins = len(milepost_bin_edges(self.corridor_length, self.milepost_width)) - 1
        if len(self.milepost_bins) != nbins:
            raise InconsistentMarginals(f"expected {nbins} milepost bins, got {len(self.milepost_bins)}")


def load_spec(path: str | Path | None = None) -> MarginalSpec:
    if path is None:
        text = resources.files("crashlab.data").joinpath("default_spec.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return MarginalSpec.from_dict(json.loads(text))


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 42
    injury_signal: float = 1.0
    injury_rate: float = 1.0 / 3.0
    surface_signal: float = 1.0
    target_vmr: float = 9.03
    damage_base_k: float = 4.5  # thousands of dollars
    damage_dispersion: float = 1.0
    damage_missing_fraction: float = 0.08
    speed_missing_fraction: float = 0.05
    spike_share: float = 0.35
    sparse_bin_max: int = 5
    # log incidence-rate ratios of the damage mean
    damage_effects: Mapping[str, float] = field(default_factory=lambda: {
        "dark": math.log(0.56),
        "adverse_weather": math.log(1.20),
        "speed": math.log(1.005),
        "alcohol": math.log(1.08),
        "cloudy": 0.0,
        "wet": math.log(0.95),
    })


# --------------------------------------------------------------------------
# allocation helpers
# --------------------------------------------------------------------------

def largest_remainder(n: int, weights) -> np.ndarray:
    """Split integer ``n`` proportionally to ``weights`` (ties to lower index)."""
    w = np.asarray(weights, dtype=float)
    if n == 0:
        return np.zeros(w.size, dtype=int)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = n * w / w.sum()
    base = np.floor(quota).astype(int)
    rem = n - int(base.sum())
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rem]] += 1
    return base


def ipf(seed_table: np.ndarray, rows, cols, tol: float = 1e-12, max_iter: int = 1000) -> np.ndarray:
    """Iterative proportional fitting of a positive table to row/column sums."""
    t = np.asarray(seed_table, dtype=float).copy()
    r = np.asarray(rows, dtype=float)
    c = np.asarray(cols, dtype=float)
    for _ in range(max_iter):
        rs = t.sum(axis=1)
        t *= np.divide(r, rs, out=np.zeros_like(r), where=rs > 0)[:, None]
        cs = t.sum(axis=0)
        t *= np.divide(c, cs, out=np.zeros_like(c), where=cs > 0)[None, :]
        if np.abs(t.sum(axis=1) - r).max() < tol:
            break
    return t


def integerize(table: np.ndarray, rows, cols) -> np.ndarray:
    """Round a real table to integers keeping the integer row and column sums."""
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    out = np.floor(table).astype(int)
    frac = table - out
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        i, j = np.unravel_index(flat, table.shape)
        if out[i].sum() < rows[i] and out[:, j].sum() < cols[j]:
            out[i, j] += 1
    # greedy pass can strand a deficit; repair along any cell with room
    while True:
        rdef = rows - out.sum(axis=1)
        cdef = cols - out.sum(axis=0)
        if not rdef.any():
            break
        i = int(np.flatnonzero(rdef > 0)[0])
        j = int(np.flatnonzero(cdef > 0)[0])
        out[i, j] += 1
    return out


def _expand(marginal: Mapping[str, int]) -> list[str]:
    return [label for label, k in marginal.items() for _ in range(int(k))]


def _weighted_pick(rng: np.random.Generator, candidates: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """Draw ``k`` distinct candidates with probability proportional to weight."""
    if k == 0:
        return np.empty(0, dtype=int)
    p = weights / weights.sum()
    return rng.choice(candidates, size=k, replace=False, p=p)


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

def _milepost_values(spec: MarginalSpec, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Mileposts (to the thousandth) honoring every 0.5-mile bin count exactly.

    Within a bin, crashes go to 0.1-mile segments in proportion to a density
    interpolated linearly between bin centres, so counts taper into sparse
    neighbours; a share of each spiked bin sits exactly at its intersection.
    Bins holding at most ``sparse_bin_max`` crashes put them in the two
    segments facing the busier neighbouring bin.
    """
    width = spec.milepost_width
    length = spec.corridor_length
    bins = np.asarray(spec.milepost_bins, dtype=float)
    centers = (np.arange(bins.size) + 0.5) * width
    seg = width / 5.0
    out = []
    spikes = {int(math.floor(m / width + 1e-9)): m for m in spec.milepost_spikes.values()}
    end_milli = int(round(length * 1000))
    for b, n in enumerate(spec.milepost_bins):
        if n == 0:
            continue
        n_spike = int(round(cfg.spike_share * n)) if b in spikes else 0
        if n_spike:
            out.extend([spikes[b]] * n_spike)
        lo = b * width
        seg_lo = lo + seg * np.arange(5)
        seg_lo = seg_lo[seg_lo < length - 1e-9]
        dens = np.interp(seg_lo + seg / 2.0, centers, bins) + 1e-6
        if n <= cfg.sparse_bin_max:
            # sparse stretches: crashes bunch up on the side of the busier neighbour
            left = bins[b - 1] if b > 0 else -1.0
            right = bins[b + 1] if b + 1 < bins.size else -1.0
            dens = np.zeros(seg_lo.size)
            if right >= left:
                dens[-2:] = 1.0
            else:
                dens[:2] = 1.0
        alloc = largest_remainder(n - n_spike, dens)
        for s0, k in zip(seg_lo, alloc):
            a = int(round(s0 * 1000))
            z = min(int(round((s0 + seg) * 1000)) - 1, end_milli)
            out.extend((rng.integers(a, z + 1, size=k) / 1000.0).tolist())
    return np.asarray(out)


def _dates(spec: MarginalSpec, rng: np.random.Generator) -> list[date]:
    years = [int(y) for y in spec.year]
    ycounts = [spec.year[str(y)] for y in years]
    mcounts = [spec.month[m] for m in MONTHS]
    joint = integerize(ipf(np.ones((len(years), 12)), ycounts, mcounts), ycounts, mcounts)
    ym = [(years[i], j + 1) for i in range(len(years)) for j in range(12) for _ in range(joint[i, j])]
    weekdays = np.array([WEEKDAYS.index(w) for w in _expand(spec.weekday)])
    rng.shuffle(weekdays)
    out = []
    for (y, m), wd in zip(ym, weekdays):
        ndays = calendar.monthrange(y, m)[1]
        days = [d for d in range(1, ndays + 1) if date(y, m, d).weekday() == wd]
        out.append(date(y, m, int(rng.choice(days))))
    return out


def _hour_weight_night(hours: np.ndarray) -> np.ndarray:
    night = (hours >= 19) | (hours <= 5)
    return np.where(night, 6.0, 1.0)


def generate(spec: MarginalSpec | None = None, config: GeneratorConfig | None = None) -> CrashDataset:
    spec = spec or load_spec()
    cfg = config or GeneratorConfig()
    spec.check()
    n = spec.n
    root = np.random.SeedSequence(cfg.seed)
    streams = dict(zip(
        ("dates", "hours", "types", "mileposts", "surface", "light", "weather",
         "alcohol", "speed", "vehicles", "injury", "damage", "missing"),
        (np.random.default_rng(s) for s in root.spawn(13)),
    ))

    dates = _dates(spec, streams["dates"])

    rng = streams["hours"]
    hours = np.array([int(h) for h in _expand(spec.hour)])
    rng.shuffle(hours)
    minutes = hours * 60 + rng.integers(0, 60, size=n)

    rng = streams["types"]
    types = np.array(_expand(spec.accident_type))
    rng.shuffle(types)

    rng = streams["mileposts"]
    mileposts = _milepost_values(spec, cfg, rng)
    rng.shuffle(mileposts)

    # surface: non-dry conditions drawn preferentially for run-off-road style crashes
    rng = streams["surface"]
    lean = {"RearEnd": -1.2, "FixedObject": 1.0, "Other": 1.0, "Animal": -0.3}
    w = np.exp(cfg.surface_signal * np.array([lean.get(t, 0.0) for t in types]))
    surface = np.array(["Dry"] * n, dtype=object)
    wet_like = [s for s in _expand(spec.road_surface) if s != "Dry"]
    picked = _weighted_pick(rng, np.arange(n), w, len(wet_like))
    rng.shuffle(wet_like)
    surface[picked] = wet_like
    if spec.road_surface.get("Dry", 0) != n - len(wet_like):
        raise InconsistentMarginals("road_surface needs a Dry entry")

    # light: darkness tied to night hours, dawn/dusk to shoulder hours
    rng = streams["light"]
    light = np.array(["Daylight"] * n, dtype=object)
    free = np.arange(n)
    plans = [
        ("Dark", _hour_weight_night(hours) ** 2),
        ("Dawn", np.where((hours >= 5) & (hours <= 8), 8.0, 1.0)),
        ("Dusk", np.where((hours >= 16) & (hours <= 20), 8.0, 1.0)),
    ]
    for label, weight in plans:
        k = spec.light.get(label, 0)
        chosen = _weighted_pick(rng, free, weight[free], k)
        light[chosen] = label
        free = np.setdiff1d(free, chosen)
    if spec.light.get("Daylight", 0) != free.size:
        raise InconsistentMarginals("light marginal must include Daylight")

    rng = streams["weather"]
    weather = np.array(_expand(spec.weather), dtype=object)
    rng.shuffle(weather)

    rng = streams["alcohol"]
    alcohol = np.zeros(n, dtype=bool)
    alcohol[_weighted_pick(rng, np.arange(n), _hour_weight_night(hours), spec.alcohol)] = True

    rng = streams["speed"]
    speed = np.clip(np.round(rng.normal(52.0, 11.0, size=n)), 15, 85)

    rng = streams["vehicles"]
    single = np.isin(types, ["Animal", "FixedObject", "Other"])
    vehicles = np.where(single, 1, 2)
    extra = 0 if spec.num_vehicles_total is None else spec.num_vehicles_total - int(vehicles.sum())
    if extra > 0:
        multi = np.flatnonzero(~single)
        wv = np.where(types[multi] == "RearEnd", 3.0, 1.0)
        vehicles[_weighted_pick(rng, multi, wv, min(extra, multi.size))] += 1

    # injuries: fixed count, odds raised near the spiked intersections and at night
    rng = streams["injury"]
    spots = np.array(list(spec.milepost_spikes.values()))
    dist = np.abs(mileposts[:, None] - spots[None, :]).min(axis=1)
    near = np.exp(-(dist / 0.25) ** 2)
    night = ((hours >= 19) | (hours <= 5)).astype(float)
    logit = cfg.injury_signal * (2.0 * near + 0.8 * night + 0.02 * (speed - 52.0))
    n_injured = int(round(cfg.injury_rate * n))
    injured = np.zeros(n, dtype=bool)
    injured[_weighted_pick(rng, np.arange(n), np.exp(logit), n_injured)] = True
    severity = np.zeros(n, dtype=int)
    severity[injured] = rng.choice([1, 2, 3, 4], size=n_injured, p=[0.55, 0.30, 0.10, 0.05])

    # damage, in thousands while modelling
    rng = streams["damage"]
    eff = cfg.damage_effects
    adverse = np.isin(weather, ["Rain", "Fog", "Other"])
    eta = (
        math.log(cfg.damage_base_k)
        + eff["dark"] * (light == "Dark")
        + eff["adverse_weather"] * adverse
        + eff["speed"] * (speed - 52.0)
        + eff["alcohol"] * alcohol
        + eff["cloudy"] * (weather == "Cloudy")
        + eff["wet"] * (surface == "Wet")
    )
    mu = np.exp(eta)
    shape = 1.0 / cfg.damage_dispersion
    damage_k = rng.gamma(shape, mu / shape)
    vmr = damage_k.var(ddof=1) / damage_k.mean()
    damage_k *= cfg.target_vmr / vmr
    damage_usd = np.round(damage_k * 1000.0)

    rng = streams["missing"]
    n_missing = int(round(cfg.damage_missing_fraction * n))
    damage_missing = np.zeros(n, dtype=bool)
    damage_missing[rng.choice(n, size=n_missing, replace=False)] = True
    speed_missing = np.zeros(n, dtype=bool)
    speed_missing[rng.choice(n, size=int(round(cfg.speed_missing_fraction * n)), replace=False)] = True

    rows = sorted(range(n), key=lambda i: (dates[i], int(minutes[i]), float(mileposts[i])))
    records = []
    for k, i in enumerate(rows, start=1):
        records.append(CrashRecord(
            crash_id=f"SYN{cfg.seed:04d}-{k:04d}",
            date=dates[i],
            time=int(minutes[i]),
            milepost=float(mileposts[i]),
            latitude=None,
            longitude=None,
            accident_type=AccidentType(str(types[i])),
            road_surface=RoadSurface(str(surface[i])),
            light=Light(str(light[i])),
            weather=Weather(str(weather[i])),
            speed_max=None if speed_missing[i] else float(speed[i]),
            num_vehicles=int(vehicles[i]),
            alcohol_drugs=bool(alcohol[i]),
            injury_severity=int(severity[i]),
            damage_usd=None if damage_missing[i] else float(damage_usd[i]),
        ))
    provenance = {"source": f"synthetic(seed={cfg.seed})", "codebook": "canonical"}
    return CrashDataset(tuple(records), spec.corridor_length, spec.study_years, provenance)


@dataclass(frozen=True)
class Mismatch:
    dimension: str
    bin: str
    expected: int
    actual: int

    def __str__(self) -> str:
        return f"{self.dimension}[{self.bin}]: expected {self.expected}, got {self.actual}"


def verify_marginals(ds: CrashDataset, spec: MarginalSpec) -> list[Mismatch]:
    """List every specified marginal cell the dataset misses; empty means exact."""
    if len(ds) != spec.n:
        return [Mismatch("InconsistentTotal", "N", spec.n, len(ds))]
    out: list[Mismatch] = []
    for dim in _MARGINAL_DIMS:
        want = getattr(spec, dim)
        have = count_by(ds, dim).as_dict()
        for label, k in want.items():
            if have.get(label, 0) != k:
                out.append(Mismatch(dim, label, k, have.get(label, 0)))
    have_bins = count_by(ds, "milepost_bin", width=spec.milepost_width)
    for label, k, got in zip(have_bins.bins, spec.milepost_bins, have_bins.counts):
        if k != got:
            out.append(Mismatch("milepost_bin", label, k, got))
    n_alcohol = sum(r.alcohol_drugs for r in ds.records)
    if n_alcohol != spec.alcohol:
        out.append(Mismatch("alcohol", "1", spec.alcohol, n_alcohol))
    return out


def generator_metadata(spec: MarginalSpec, cfg: GeneratorConfig) -> dict:
    return {
        "seed": cfg.seed,
        "config": {k: (dict(v) if isinstance(v, Mapping) else v)
                   for k, v in cfg.__dict__.items()},
        "marginal_provenance": dict(spec.provenance),
        "weekday_residual": 0,
    }
