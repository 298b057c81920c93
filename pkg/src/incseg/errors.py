"""Exception hierarchy. The CLI maps these onto its exit codes."""


class IncsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IncsegError, ValueError):
    """Invalid configuration, schedule, or command usage."""


class ScheduleError(ConfigError):
    pass


class UsageError(ConfigError):
    """An operation was called in a state where it does not apply."""


class DataError(IncsegError):
    """Missing, malformed, or inconsistent data on disk or in memory."""


class LoadError(DataError, FileNotFoundError):
    pass


class LabelFormatError(DataError, ValueError):
    pass


class SamplingError(DataError, ValueError):
    pass


class SnapshotError(DataError, ValueError):
    pass


class ShapeError(IncsegError, ValueError):
    """Array shapes or channel counts do not line up."""
