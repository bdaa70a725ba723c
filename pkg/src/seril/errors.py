"""Exception types mapped to CLI exit statuses."""


class SerilError(Exception):
    exit_status = 1


class ConfigError(SerilError, ValueError):
    exit_status = 2


class MissingArtifactError(SerilError):
    """Missing, truncated or corrupt input file (bad magic, version or checksum)."""

    exit_status = 3


class TrainingDivergenceError(SerilError, FloatingPointError):
    exit_status = 4


class MissingHeadError(SerilError, KeyError):
    exit_status = 2


class DegenerateInputError(SerilError):
    exit_status = 5
