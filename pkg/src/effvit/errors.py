"""Exception hierarchy shared by every subpackage."""


class EffVitError(Exception):
    """Base class for all errors raised by effvit."""


class ShapeError(EffVitError, ValueError):
    pass


class ParameterError(EffVitError, ValueError):
    pass


class StateError(EffVitError, RuntimeError):
    pass


class ContractError(EffVitError, ValueError):
    pass


class NumericError(EffVitError, FloatingPointError):
    """A NaN or Inf appeared in an op output while checks were enabled."""


class SpecError(EffVitError, ValueError):
    pass


class StructureError(EffVitError, ValueError):
    pass


class InputError(EffVitError, ValueError):
    """Malformed external input. ``offset`` is the byte position, if known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
