"""Exception hierarchy shared by every crashlab module."""
from __future__ import annotations


class CrashLabError(Exception):
    """Base class; the CLI maps these to exit code 1 (data error)."""


class MissingColumn(CrashLabError):
    def __init__(self, column: str):
        super().__init__(f"missing required column {column!r}")
        self.column = column


class BadValue(CrashLabError):
    def __init__(self, row: int | None, column: str, raw: str, reason: str = ""):
        where = f"row {row}, " if row is not None else ""
        msg = f"{where}column {column!r}: bad value {raw!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.row = row
        self.column = column
        self.raw = raw
        self.reason = reason


class DuplicateId(CrashLabError):
    def __init__(self, row: int, crash_id: str):
        super().__init__(f"row {row}: duplicate crash_id {crash_id!r}")
        self.row = row
        self.crash_id = crash_id


class CsvParseError(CrashLabError):
    """Raised by strict parsing; carries every row-level error found."""

    def __init__(self, errors):
        self.errors = list(errors)
        head = "; ".join(str(e) for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} row error(s): {head}{more}")


class AllDamageMissing(CrashLabError):
    pass


class UnknownDimension(CrashLabError):
    pass


class DegenerateInput(CrashLabError):
    pass


class ZeroExpected(CrashLabError):
    pass


class LengthMismatch(CrashLabError):
    pass


class NonPositiveExpected(CrashLabError):
    pass


class DomainError(CrashLabError):
    pass


class EmptyInput(CrashLabError):
    pass


class NonPositiveBandwidth(CrashLabError):
    pass


class ZeroVariance(CrashLabError):
    pass


class ZeroMean(CrashLabError):
    pass


class RankDeficient(CrashLabError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class NotConverged(CrashLabError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationSuspect(CrashLabError):
    pass


class SingleClass(CrashLabError):
    pass


class SchemaMismatch(CrashLabError):
    pass


class NoSplits(CrashLabError):
    pass


class InconsistentMarginals(CrashLabError):
    pass


class EmptyTable(CrashLabError):
    pass
