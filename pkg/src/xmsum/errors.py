"""Exception taxonomy shared across the package.

Each error carries a short machine-readable ``category`` that the CLI uses
to emit one-line diagnostics and pick an exit code.
"""


class XmsumError(Exception):
    """Base class for package errors."""

    category = "internal"


class DimensionError(XmsumError):
    """Shape or dimensionality mismatch."""

    category = "data"


class ConfigError(XmsumError):
    """Invalid or unknown configuration value."""

    category = "config"


class IngestionError(XmsumError):
    """Malformed embedding record or corpus file."""

    category = "data"


class StateError(XmsumError):
    """Operation invoked in an invalid engine state."""

    category = "internal"


class EvaluationError(XmsumError):
    """A numeric evaluation produced non-finite values."""

    category = "internal"


class OracleScaleError(XmsumError):
    """Exact-solver instance above the supported size."""

    category = "internal"


class VocabularyError(XmsumError):
    """Token missing from the language-model vocabulary."""

    category = "data"


class TrainingDivergenceError(XmsumError):
    """Non-finite loss or gradient during optimization."""

    category = "train"


class PathError(XmsumError):
    """Missing or unreadable input path."""

    category = "path"


class CheckpointVersionError(XmsumError):
    """Checkpoint magic or stored config incompatible with this build."""

    category = "version"
