"""Exception hierarchy of the package.

Every error raised on purpose derives from InexactMetaError, grouped by the module family that raises it, so that the
pipeline can attribute a failure to its stage and the CLI can map it to an exit code.
"""


class InexactMetaError(Exception):
    """Base class of every error raised by this package."""


# numerics

class NumericsError(InexactMetaError):
    pass


class ZeroNorm(NumericsError):
    pass


class EmptyInput(NumericsError):
    pass


class DimensionMismatch(NumericsError):
    pass


class NonFiniteFunction(NumericsError):
    pass


class NonPositiveTemperature(NumericsError):
    pass


# data

class DataError(InexactMetaError):
    pass


class InvalidSpec(DataError):
    pass


class OverlappingSplit(DataError):
    pass


class EmptySplit(DataError):
    pass


class IncompleteSplit(DataError):
    pass


class DatasetIoError(DataError):
    pass


class FormatError(DataError):
    pass


# training

class TrainingError(InexactMetaError):
    pass


class InvalidLabel(TrainingError):
    pass


class DivergenceDetected(TrainingError):
    pass


# pseudo-labeling

class PseudoLabelError(InexactMetaError):
    pass


class EmptyDataset(PseudoLabelError):
    pass


class InvalidNs(PseudoLabelError):
    pass


class EmbeddingDimMismatch(PseudoLabelError):
    pass


# episodes

class EpisodeError(InexactMetaError):
    pass


class InsufficientClasses(EpisodeError):
    pass


class InsufficientSamples(EpisodeError):
    pass


class EmptyClass(EpisodeError):
    pass


# metrics

class MetricsError(InexactMetaError):
    pass


class EmptyTrainSet(MetricsError):
    pass


class LengthMismatch(MetricsError):
    pass


# orchestration

class ConfigError(InexactMetaError):
    pass


class StageFailure(InexactMetaError):
    """Wraps any error raised inside a pipeline stage together with the stage name."""

    def __init__(self, stage: str, cause: Exception) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f'stage {stage!r} failed: {type(cause).__name__}: {cause}')
