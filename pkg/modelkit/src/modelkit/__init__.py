"""modelkit: training/export harness for interchange-format model bundles."""

from .bundle import ExportBundle, export_subset, train_and_export
from .errors import ConfigError, ExportError, ModelkitError

__all__ = [
    "ConfigError",
    "ExportBundle",
    "ExportError",
    "ModelkitError",
    "export_subset",
    "train_and_export",
]
