"""Exception hierarchy shared by every module of the workbench."""


class WorkbenchError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(WorkbenchError, ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(WorkbenchError, ValueError):
    """Input is mathematically degenerate (e.g. a zero-norm vector)."""


class NumericalError(WorkbenchError, FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class ContractError(WorkbenchError, RuntimeError):
    """A caller broke an API precondition (non-scalar loss, missing gradient, ...)."""


class ConfigError(WorkbenchError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(WorkbenchError, ValueError):
    """Dataset content cannot satisfy the request."""


class RunError(WorkbenchError, RuntimeError):
    """A training run failed; the message is persisted in the run record."""


class RecordParseError(WorkbenchError, ValueError):
    """A persisted file is malformed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f" line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class ProvenanceError(WorkbenchError, ValueError):
    """Artifacts derived from different backbones were combined."""


class StatisticsError(WorkbenchError, ValueError):
    """A statistic is undefined for the given sample."""


class UsageError(WorkbenchError, ValueError):
    """A command was invoked with unusable arguments or inputs."""
