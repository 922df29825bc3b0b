"""Exception types raised across the package."""


class LemixError(Exception):
    """Base class for all package errors."""


class ConfigError(LemixError, ValueError):
    """Invalid configuration value.

    ``field`` names the offending setting so callers can point users at it.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceParseError(LemixError, ValueError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ProfilingIncompleteError(LemixError, ValueError):
    def __init__(self, gaps):
        self.gaps = list(gaps)
        listed = ", ".join(f"stage {s} {op}" for s, op in self.gaps)
        super().__init__(f"missing profiling observations for: {listed}")


class ContractViolation(LemixError, ValueError):
    """An operation was called outside its preconditions."""


class InfeasibleTaskError(LemixError):
    """A task cannot fit under the memory threshold even on an empty stage."""


class LivelockError(LemixError, RuntimeError):
    """The event loop stopped making progress."""


class ComparisonError(LemixError, ValueError):
    """Reports cannot be compared (different workloads)."""
