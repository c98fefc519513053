"""Error taxonomy for the export harness."""


class ModelkitError(Exception):
    """Base class; every deliberate failure derives from this."""

    exit_code = 4


class ConfigError(ModelkitError):
    """Caller asked for something the harness cannot honour."""

    exit_code = 2


class ExportError(ModelkitError):
    """Export refused (accuracy floor, self-check failure)."""

    exit_code = 2
