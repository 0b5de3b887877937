"""Exception hierarchy shared by every subpackage."""


class TileTrainError(Exception):
    pass


class ShapeError(TileTrainError, ValueError):
    """Tensor or filter dimensions do not line up."""


class ConfigurationError(TileTrainError, ValueError):
    """A grid, profile or model cannot be planned."""


class PlanInvariantError(TileTrainError, AssertionError):
    """The runtime found data the plan promised to be present missing.

    This always indicates a bug in plan construction, never bad user input.
    """


class ConsistencyError(TileTrainError):
    pass


class ParseError(TileTrainError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(TileTrainError, ValueError):
    """Binary file or wire frame failed validation."""


class FrameError(FormatError):
    pass


class TransportError(TileTrainError):
    pass


class TransportTimeout(TransportError, TimeoutError):
    def __init__(self, selector, timeout):
        self.selector = selector
        self.timeout = timeout
        super().__init__(f"no message matching {selector} within {timeout:g}s")
