from typing import Optional


class TraderError(Exception):
    """
    Base class for every failure raised by the research engine.
    The CLI prints `error_class: message` on one line and exits nonzero.
    """

    @property
    def error_class(self) -> str:
        return type(self).__name__


# --- Data errors ---
class DataError(TraderError):
    pass


class MissingFileError(DataError):
    pass


class SchemaError(DataError):
    pass


class CorruptRowError(DataError):
    def __init__(self, line_number: int, detail: str):
        self.line_number = line_number
        super().__init__(f"row {line_number}: {detail}")


class UnknownTickerError(DataError):
    pass


class EmptyRangeError(DataError):
    pass


class MissingSeriesError(DataError):
    pass


class OverlapError(DataError):
    pass


class EmptySplitError(DataError):
    pass


# --- Computation errors ---
class InvalidParameterError(TraderError):
    pass


class InsufficientDataError(TraderError):
    pass


class DimensionError(TraderError):
    pass


class NumericalError(TraderError):
    pass


class SingularDesignError(TraderError):
    pass


# --- Runtime errors ---
class EnvironmentStateError(TraderError):
    pass


class CheckpointMismatchError(TraderError):
    pass


class TrainingAbortedError(TraderError):
    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        self.last_good_checkpoint = last_good_checkpoint
        if last_good_checkpoint:
            message = f"{message} (last good checkpoint: {last_good_checkpoint})"
        super().__init__(message)


class PeriodMismatchError(TraderError):
    pass


class MissingArtifactError(TraderError):
    pass
