"""Exception hierarchy.

Errors split into two families so the command line can map them onto exit
codes: ``ValidationError`` (bad input, exit 2) and ``NumericalError``
(a computation failed to produce an answer, exit 3).
"""


class MirrorfieldError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MirrorfieldError, ValueError):
    pass


class NumericalError(MirrorfieldError, ArithmeticError):
    pass


class InvalidPlaneError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class InfeasibleSpacingError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SchemaVersionError(ValidationError):
    pass


class BehindCameraError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class FootprintUnboundedError(NumericalError):
    def __init__(self, message, mirror_index=None):
        super().__init__(message)
        self.mirror_index = mirror_index


class UnderdeterminedError(NumericalError):
    pass


class NotVisibleError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, message, mirror_index=None):
        super().__init__(message)
        self.mirror_index = mirror_index


class InfeasibleStartError(ValidationError):
    pass


class PipelineError(MirrorfieldError):
    """Wraps an error raised inside one stage of the decode pipeline."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
