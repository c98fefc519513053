"""Exception hierarchy shared across the package.

Every error carries the process exit code the CLI maps it to: 2 for anything
the user can fix (bad flags, bad files, bad math inputs), 3 for I/O, 4 for
internal faults.
"""


class QsylabError(Exception):
    exit_code = 4


class ConfigError(QsylabError):
    """Invalid parameter or configuration value."""

    exit_code = 2


class RangeError(ConfigError):
    """Degenerate numeric range (e.g. x_max <= x_min)."""


class InputError(QsylabError):
    """Runtime input rejected: wrong shape, non-finite value, out of range."""

    exit_code = 2


class FormatError(QsylabError):
    """File content failed parsing or validation."""

    exit_code = 2


class AggregationError(QsylabError):
    """No successful repetitions to aggregate."""

    exit_code = 2
