"""Exception types shared across the package."""


class GuidEditError(Exception):
    """Base class for all package-specific errors."""


class ScheduleError(GuidEditError, ValueError):
    """Invalid noise-schedule construction or out-of-range index."""


class NumericGuardError(GuidEditError, FloatingPointError):
    """A sampler step, objective, or gradient produced non-finite values."""


class CacheError(GuidEditError):
    """Trajectory-cache misuse: missing record, write-after-complete, bad file."""


class ConfigError(GuidEditError, ValueError):
    """Malformed config file or flag value; carries line/field context."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.field = field
