"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2; ``CohortAbort`` maps to 3.
"""


class VentriqError(Exception):
    pass


class DataError(VentriqError):
    """Bad input data or file content."""


class CohortAbort(VentriqError):
    """Failure that prevents any subject from being processed."""


class FormatError(DataError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class DuplicateEntry(DataError):
    pass


class SpecError(DataError):
    pass


class ConfigError(DataError):
    pass


class DegenerateContour(DataError):
    pass


class DegenerateFit(DataError):
    pass


class DegenerateNormal(DataError):
    pass


class DegenerateVariance(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class CorrespondenceError(DataError):
    pass


class DimensionError(DataError):
    pass


class InsufficientData(DataError):
    pass


class InsufficientVariance(InsufficientData):
    pass


class InsufficientSlices(DataError):
    pass


class MissingView(DataError):
    pass


class DetectionFailure(DataError):
    pass


class NoObservations(DataError):
    pass


class MatchFailure(DataError):
    pass


class EmptySegmentation(DataError):
    pass


class QuantificationError(DataError):
    pass
