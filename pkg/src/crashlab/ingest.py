"""Crash-record CSV ingestion: schema validation, codebook encoding, imputation.

The input layout is one row per accident with vehicle data already
aggregated.  The header must be exactly :data:`COLUMNS`.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import re
import statistics
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    AllDamageMissing,
    BadValue,
    CsvParseError,
    DuplicateId,
    MissingColumn,
)

COLUMNS: tuple[str, ...] = (
    "crash_id", "date", "time", "milepost", "latitude", "longitude",
    "accident_type", "road_surface", "light", "weather", "speed_max",
    "num_vehicles", "alcohol_drugs", "injury_severity", "damage_usd",
)

DEFAULT_CORRIDOR_LENGTH = 8.406
DEFAULT_STUDY_YEARS = (2019, 2023)


class AccidentType(str, Enum):
    ANGLE = "Angle"
    REAR_END = "RearEnd"
    SIDESWIPE = "Sideswipe"
    TURN = "Turn"
    ANIMAL = "Animal"
    FIXED_OBJECT = "FixedObject"
    OTHER = "Other"


class RoadSurface(str, Enum):
    DRY = "Dry"
    WET = "Wet"
    ICE = "Ice"
    SNOW = "Snow"
    SAND = "Sand"
    OTHER = "Other"


class Light(str, Enum):
    DAYLIGHT = "Daylight"
    DARK = "Dark"
    DAWN = "Dawn"
    DUSK = "Dusk"


class Weather(str, Enum):
    CLEAR = "Clear"
    CLOUDY = "Cloudy"
    RAIN = "Rain"
    FOG = "Fog"
    OTHER = "Other"


ENUM_COLUMNS: dict[str, type[Enum]] = {
    "accident_type": AccidentType,
    "road_surface": RoadSurface,
    "light": Light,
    "weather": Weather,
}


@dataclass(frozen=True)
class CrashRecord:
    """One accident, vehicle information pre-aggregated."""

    crash_id: str
    date: date
    time: int  # minutes since midnight
    milepost: float
    latitude: float | None
    longitude: float | None
    accident_type: AccidentType
    road_surface: RoadSurface
    light: Light
    weather: Weather
    speed_max: float | None
    num_vehicles: int
    alcohol_drugs: bool
    injury_severity: int
    damage_usd: float | None

    @property
    def hour(self) -> int:
        return self.time // 60

    @property
    def injured(self) -> bool:
        return self.injury_severity >= 1


@dataclass(frozen=True)
class CrashDataset:
    records: tuple[CrashRecord, ...]
    corridor_length: float
    study_years: tuple[int, int]
    provenance: Mapping[str, str] = field(default_factory=dict)
    errors: tuple[Exception, ...] = ()

    def __post_init__(self):
        if len(self.records) == 0:
            raise ValueError("a CrashDataset needs at least one record")
        ids = [r.crash_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("crash_ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_years(self) -> int:
        return self.study_years[1] - self.study_years[0] + 1

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def replace_records(self, records: Iterable[CrashRecord]) -> "CrashDataset":
        return dataclasses.replace(self, records=tuple(records))


@dataclass(frozen=True)
class Codebook:
    """Raw-code to canonical-enum mapping, matched case-insensitively."""

    mapping: Mapping[str, str]
    version: str = "identity"

    def lookup(self, raw: str) -> str | None:
        return self.mapping.get(raw.strip().lower())


def load_codebook(path: str | Path | None = None) -> Codebook:
    """Read a two-column ``raw_code,canonical_enum`` CSV.

    ``None`` loads the codebook bundled with the package.
    """
    if path is None:
        text = resources.files("crashlab.data").joinpath("codebook.csv").read_text("utf-8")
        source = "builtin"
    else:
        text = Path(path).read_text("utf-8")
        source = str(path)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["raw_code", "canonical_enum"]:
        raise MissingColumn("raw_code,canonical_enum")
    mapping = {row["raw_code"].strip().lower(): row["canonical_enum"].strip() for row in reader}
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    return Codebook(mapping=mapping, version=f"{Path(source).name}:{digest}")


_TIME_COLON = re.compile(r"^(\d{1,2}):(\d{2})$")
_TIME_COMPACT = re.compile(r"^(\d{2})(\d{2})$")


def parse_time(raw: str) -> int:
    """Parse ``HH:MM`` (24-hour) or ``HHMM`` into minutes since midnight.

    >>> parse_time("07:30")
    450
    """
    text = raw.strip()
    m = _TIME_COLON.match(text) or _TIME_COMPACT.match(text)
    if m is None:
        raise BadValue(None, "time", raw, "expected HH:MM or HHMM")
    hours, minutes = int(m.group(1)), int(m.group(2))
    if hours > 23 or minutes > 59:
        raise BadValue(None, "time", raw, "out of range")
    return hours * 60 + minutes


def format_time(minutes: int) -> str:
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def _opt_float(text: str, column: str, row: int, minimum: float | None = None) -> float | None:
    if text.strip() == "":
        return None
    return _req_float(text, column, row, minimum)


def _req_float(text: str, column: str, row: int, minimum: float | None = None) -> float:
    try:
        value = float(text)
    except ValueError:
        raise BadValue(row, column, text, "not a number") from None
    if value != value or value in (float("inf"), float("-inf")):
        raise BadValue(row, column, text, "not finite")
    if minimum is not None and value < minimum:
        raise BadValue(row, column, text, f"must be >= {minimum}")
    return value


def _req_int(text: str, column: str, row: int, lo: int, hi: int | None = None) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise BadValue(row, column, text, "not an integer") from None
    if value < lo or (hi is not None and value > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise BadValue(row, column, text, f"must be in {bound}")
    return value


def _enum(text: str, column: str, row: int, codebook: Codebook, permissive: bool) -> Enum:
    enum_cls = ENUM_COLUMNS[column]
    canonical = codebook.lookup(text)
    candidates = [canonical, text.strip()] if canonical is not None else [text.strip()]
    for cand in candidates:
        try:
            return enum_cls(cand)
        except ValueError:
            continue
    if permissive and "Other" in enum_cls._value2member_map_:
        return enum_cls("Other")
    raise BadValue(row, column, text, f"unknown code for {enum_cls.__name__}")


def parse_row(
    row: Mapping[str, str],
    lineno: int,
    codebook: Codebook,
    corridor_length: float,
    study_years: tuple[int, int],
    permissive: bool = False,
) -> CrashRecord:
    """Convert one CSV row; raises :class:`BadValue` on the first bad field."""
    crash_id = row["crash_id"].strip()
    if not crash_id:
        raise BadValue(lineno, "crash_id", row["crash_id"], "empty")
    try:
        day = date.fromisoformat(row["date"].strip())
    except ValueError:
        raise BadValue(lineno, "date", row["date"], "expected YYYY-MM-DD") from None
    if not study_years[0] <= day.year <= study_years[1]:
        raise BadValue(lineno, "date", row["date"], f"outside study window {study_years[0]}-{study_years[1]}")
    try:
        minutes = parse_time(row["time"])
    except BadValue as exc:
        raise BadValue(lineno, "time", row["time"], exc.reason) from None
    milepost = _req_float(row["milepost"], "milepost", lineno, 0.0)
    if milepost > corridor_length + 0.1:
        raise BadValue(lineno, "milepost", row["milepost"], f"beyond corridor end {corridor_length}")
    alcohol = row["alcohol_drugs"].strip()
    if alcohol not in ("0", "1"):
        raise BadValue(lineno, "alcohol_drugs", row["alcohol_drugs"], "expected 0 or 1")
    return CrashRecord(
        crash_id=crash_id,
        date=day,
        time=minutes,
        milepost=milepost,
        latitude=_opt_float(row["latitude"], "latitude", lineno),
        longitude=_opt_float(row["longitude"], "longitude", lineno),
        accident_type=_enum(row["accident_type"], "accident_type", lineno, codebook, permissive),
        road_surface=_enum(row["road_surface"], "road_surface", lineno, codebook, permissive),
        light=_enum(row["light"], "light", lineno, codebook, permissive),
        weather=_enum(row["weather"], "weather", lineno, codebook, permissive),
        speed_max=_opt_float(row["speed_max"], "speed_max", lineno, 0.0),
        num_vehicles=_req_int(row["num_vehicles"], "num_vehicles", lineno, 1),
        alcohol_drugs=alcohol == "1",
        injury_severity=_req_int(row["injury_severity"], "injury_severity", lineno, 0, 4),
        damage_usd=_opt_float(row["damage_usd"], "damage_usd", lineno, 0.0),
    )


def parse_csv(
    path: str | Path,
    codebook: Codebook | None = None,
    *,
    corridor_length: float = DEFAULT_CORRIDOR_LENGTH,
    study_years: tuple[int, int] = DEFAULT_STUDY_YEARS,
    permissive: bool = False,
    strict: bool = True,
) -> CrashDataset:
    """Parse a crash CSV into a :class:`CrashDataset`.

    Every data row yields exactly one record or one row-level error.  With
    ``strict`` (the default) any row error raises :class:`CsvParseError`;
    otherwise the bad rows are dropped and kept on ``dataset.errors``.
    ``permissive`` maps unknown categorical codes to ``Other`` where the
    column has one.
    """
    if codebook is None:
        codebook = load_codebook()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        if tuple(header) != COLUMNS:
            extra = [h for h in header if h not in COLUMNS]
            raise MissingColumn(f"header must be exactly {','.join(COLUMNS)}; unexpected {extra or 'order'}")
        records: list[CrashRecord] = []
        errors: list[Exception] = []
        seen: set[str] = set()
        # line 1 is the header
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                errors.append(BadValue(lineno, "*", ",".join(str(v) for v in row.values()), "wrong field count"))
                continue
            try:
                rec = parse_row(row, lineno, codebook, corridor_length, study_years, permissive)
            except BadValue as exc:
                errors.append(exc)
                continue
            if rec.crash_id in seen:
                errors.append(DuplicateId(lineno, rec.crash_id))
                continue
            seen.add(rec.crash_id)
            records.append(rec)
    if errors and strict:
        raise CsvParseError(errors)
    if not records:
        raise CsvParseError(errors or [BadValue(None, "*", "", "file has no data rows")])
    provenance = {"source": str(path), "codebook": codebook.version}
    return CrashDataset(tuple(records), corridor_length, study_years, provenance, tuple(errors))


def _fmt_float(value: float | None) -> str:
    if value is None:
        return ""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def record_to_row(rec: CrashRecord) -> list[str]:
    return [
        rec.crash_id,
        rec.date.isoformat(),
        format_time(rec.time),
        _fmt_float(rec.milepost),
        _fmt_float(rec.latitude),
        _fmt_float(rec.longitude),
        rec.accident_type.value,
        rec.road_surface.value,
        rec.light.value,
        rec.weather.value,
        _fmt_float(rec.speed_max),
        str(rec.num_vehicles),
        "1" if rec.alcohol_drugs else "0",
        str(rec.injury_severity),
        _fmt_float(rec.damage_usd),
    ]


def dumps_csv(records: Sequence[CrashRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow(record_to_row(rec))
    return buf.getvalue()


def write_csv(ds: CrashDataset | Sequence[CrashRecord], path: str | Path) -> Path:
    records = ds.records if isinstance(ds, CrashDataset) else ds
    path = Path(path)
    path.write_text(dumps_csv(records), encoding="utf-8")
    return path


@dataclass(frozen=True)
class ImputedValue:
    crash_id: str
    accident_type: str
    value: float
    fallback: bool


@dataclass(frozen=True)
class ImputationReport:
    entries: tuple[ImputedValue, ...]
    group_medians: Mapping[str, float]
    global_median: float

    @property
    def imputed_ids(self) -> list[str]:
        return [e.crash_id for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "n_imputed": len(self.entries),
            "global_median": self.global_median,
            "group_medians": dict(self.group_medians),
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }


def impute_damage(ds: CrashDataset) -> tuple[CrashDataset, ImputationReport]:
    """Fill missing ``damage_usd`` with the median of the same accident type.

    Types with no observed damage fall back to the global median; such
    entries carry ``fallback=True``.
    """
    observed: dict[AccidentType, list[float]] = {}
    for rec in ds.records:
        if rec.damage_usd is not None:
            observed.setdefault(rec.accident_type, []).append(rec.damage_usd)
    all_values = [v for vals in observed.values() for v in vals]
    missing = [r for r in ds.records if r.damage_usd is None]
    if not all_values:
        if missing:
            raise AllDamageMissing("no damage value observed; no median is computable")
        return ds, ImputationReport((), {}, float("nan"))
    global_median = float(statistics.median(all_values))
    medians = {t.value: float(statistics.median(v)) for t, v in observed.items()}

    entries = []
    out = []
    for rec in ds.records:
        if rec.damage_usd is None:
            value = medians.get(rec.accident_type.value)
            fallback = value is None
            if fallback:
                value = global_median
            entries.append(ImputedValue(rec.crash_id, rec.accident_type.value, value, fallback))
            rec = dataclasses.replace(rec, damage_usd=value)
        out.append(rec)
    report = ImputationReport(tuple(entries), dict(sorted(medians.items())), global_median)
    return ds.replace_records(out), report
