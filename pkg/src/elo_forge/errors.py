"""Exception hierarchy shared by every elo_forge module."""


class EloError(Exception):
    """Base class for all package errors."""


class InvalidShape(EloError, ValueError):
    pass


class ShapeError(EloError, ValueError):
    pass


class EmptyLossError(EloError, ValueError):
    pass


class NonFiniteError(EloError, FloatingPointError):
    pass


class ConfigError(EloError, ValueError):
    pass


class SeqLenError(EloError, ValueError):
    pass


class UnknownNameError(EloError, KeyError, NameError):
    """A canonical tensor name (or LoRA target) does not exist in the model."""


class SelectionError(EloError, ValueError):
    pass


class LineageError(EloError, ValueError):
    pass


class DivergenceError(EloError, FloatingPointError):
    pass


class MergeError(EloError, RuntimeError):
    pass


class EmptyDataError(EloError, ValueError):
    pass


class RatioError(EloError, ValueError):
    pass


class FormatError(EloError, ValueError):
    pass


class CorruptCheckpoint(EloError, ValueError):
    pass
