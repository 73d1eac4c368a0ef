"""Exception hierarchy. Each family maps to a CLI exit code."""


class VddError(Exception):
    exit_code = 1


class ProtocolError(VddError):
    """Invalid GMDA task definition."""

    exit_code = 3


class DataError(VddError):
    """Missing or inconsistent data (ingestion, exemplar pool, batching)."""

    exit_code = 3


class ConfigError(VddError):
    exit_code = 3


class TrainingError(VddError):
    exit_code = 4


class EvaluationError(VddError):
    exit_code = 5
