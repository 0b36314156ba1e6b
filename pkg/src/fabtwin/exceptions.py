class FabTwinError(Exception):
    """Base class for all errors raised by fabtwin."""


class InvalidInputError(FabTwinError, ValueError):
    pass


class InvalidConfigError(FabTwinError, ValueError):
    pass


class InvalidSpecError(FabTwinError, ValueError):
    pass


class UnsupportedFormatError(FabTwinError, ValueError):
    pass


class TrainingDivergedError(FabTwinError, RuntimeError):
    """Raised when a training loss becomes non-finite.

    The last loss record (with the offending values) is available as
    ``record``.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
