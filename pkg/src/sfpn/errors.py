"""Exception hierarchy shared by every stage of the pipeline."""


class SfpnError(Exception):
    """Base class for all package errors."""


class ConfigError(SfpnError, ValueError):
    pass


class ParseError(SfpnError, ValueError):
    pass


class ValidationError(SfpnError, ValueError):
    pass


class ShapeError(SfpnError, ValueError):
    pass


class InsufficientDataError(SfpnError, ValueError):
    pass


class NonFiniteError(SfpnError, FloatingPointError):
    pass


class CheckpointError(SfpnError, IOError):
    pass


class TrainingDiverged(SfpnError, RuntimeError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
