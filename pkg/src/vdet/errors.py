"""Exception types raised across the engine."""


class VdetError(Exception):
    pass


class ShapeError(VdetError, ValueError):
    """Tensor dimensions do not agree with what an operation expects."""


class ParameterError(VdetError, ValueError):
    """An operation or config received an out-of-range argument."""


class BuildError(VdetError):
    """A model channel plan is inconsistent."""


class ParseError(VdetError, ValueError):
    """Malformed label, image or config text."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(VdetError):
    """Checkpoint magic or version does not match."""


class IntegrityError(VdetError):
    """Checkpoint payload is truncated or inconsistent with its header."""


class NonFiniteLossError(VdetError, FloatingPointError):
    pass
