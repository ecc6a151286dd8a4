"""Exception hierarchy shared by all pipeline stages."""


class GeoxplainError(Exception):
    """Base class for every error raised by this package."""


# ingest
class MissingFile(GeoxplainError, FileNotFoundError):
    pass


class SchemaError(GeoxplainError, ValueError):
    pass


class LabelOutOfRange(SchemaError):
    pass


class DecodeError(GeoxplainError, ValueError):
    pass


class NonRGBInput(GeoxplainError, ValueError):
    pass


class AugmentationOnEval(GeoxplainError, ValueError):
    pass


# classifier
class ShapeMismatch(GeoxplainError, ValueError):
    pass


class BackendFailure(GeoxplainError, RuntimeError):
    pass


class EmptySplit(GeoxplainError, ValueError):
    pass


class DivergenceDetected(GeoxplainError, RuntimeError):
    pass


# attribution
class CapabilityMissing(GeoxplainError, TypeError):
    pass


class NonFiniteValues(GeoxplainError, ValueError):
    pass


class InvalidPercentile(GeoxplainError, ValueError):
    pass


# segmentation / selection
class ConceptsUnsupported(GeoxplainError, ValueError):
    pass


class EmptyMask(GeoxplainError, ValueError):
    pass


class DimensionMismatch(GeoxplainError, ValueError):
    pass


class UnsortedInput(GeoxplainError, ValueError):
    pass


# faithfulness
class BoxOutOfBounds(GeoxplainError, ValueError):
    pass


class BoxLargerThanImage(GeoxplainError, ValueError):
    pass


class EmptyResults(GeoxplainError, ValueError):
    pass


# cli
class ConfigError(GeoxplainError, ValueError):
    exit_code = 1


class MissingArtifacts(GeoxplainError, FileNotFoundError):
    exit_code = 2


class MissingResults(MissingArtifacts):
    pass


class FatalBackendError(GeoxplainError, RuntimeError):
    exit_code = 3


class GridTooLarge(ConfigError):
    pass
