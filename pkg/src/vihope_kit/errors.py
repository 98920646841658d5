"""Exceptions shared across the pipeline, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class MissingPrerequisiteError(RuntimeError):
    """A training stage was requested before its prerequisite (exit code 3)."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training (exit code 4)."""


class NoObservationError(ValueError):
    """Neither visual nor tactile points are available for a sample."""
