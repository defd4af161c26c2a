"""Exception classes raised across the package.

Everything derives from :class:`LGNError`. The CLI maps :class:`ValidationFailure`
subclasses to exit code 1 and anything else to exit code 2.
"""


class LGNError(Exception):
    pass


class ValidationFailure(LGNError):
    """Bad user input: config, data files, queries. CLI exit code 1."""


class DimensionError(LGNError, ValueError):
    pass


class ShapeError(DimensionError):
    pass


class TapeError(LGNError, RuntimeError):
    pass


class DeterminismError(LGNError, RuntimeError):
    pass


class OptimizerError(LGNError, RuntimeError):
    pass


class ConfigError(ValidationFailure, ValueError):
    pass


class EmptyQueryError(ValidationFailure, ValueError):
    pass


class InvalidCellError(ValidationFailure, ValueError):
    pass


class InvalidSpanError(ValidationFailure, ValueError):
    pass


class NoProposalError(ValidationFailure, ValueError):
    pass


class DataError(ValidationFailure):
    pass


class FormatError(DataError):
    """Malformed binary feature file or checkpoint."""


class AnnotationError(DataError):
    """Annotation line that fails validation (span outside the video, bad fields)."""


class IngestionError(DataError):
    """Sample whose features and annotation cannot be combined."""


class ResolutionError(IngestionError):
    """Annotation references a video that has no feature file."""


class CheckpointError(DataError):
    pass
