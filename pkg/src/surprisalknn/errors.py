"""Exception hierarchy; each class carries the CLI exit code for its error class."""


class SurprisalKNNError(Exception):
    exit_code = 1


class UsageError(SurprisalKNNError, ValueError):
    """Bad arguments: unknown feature names, invalid parameter ranges."""

    exit_code = 2


class DataError(SurprisalKNNError, ValueError):
    """Input data that cannot be parsed or does not fit the schema."""

    exit_code = 3


class InfeasibleError(SurprisalKNNError):
    """A requested operation cannot be satisfied by the model (e.g. no candidates)."""

    exit_code = 4


class CorruptionError(SurprisalKNNError):
    """Snapshot is truncated, has a bad digest, or an unsupported version."""

    exit_code = 5
