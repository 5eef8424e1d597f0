"""Exception hierarchy. Every error raised on purpose by the package derives from
:class:`LidarFlowError` so the CLI can turn it into a clean exit code."""


class LidarFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(LidarFlowError, ValueError):
    """An operand has the wrong extents.

    ``operand`` names the offending argument and ``expected`` describes what
    was required.
    """

    def __init__(self, op, operand, expected, got):
        self.op = op
        self.operand = operand
        self.expected = expected
        self.got = tuple(got) if got is not None else None
        super().__init__(f"{op}: operand '{operand}' expected {expected}, got {self.got}")


class GraphError(LidarFlowError, RuntimeError):
    """Backward was requested on something without a recorded graph."""


class OptimizerError(LidarFlowError, RuntimeError):
    pass


class FormatError(LidarFlowError, ValueError):
    """A file does not follow its binary layout (bad magic, truncated, ...)."""


class ChecksumError(FormatError):
    pass


class ConfigError(LidarFlowError, ValueError):
    pass


class DataError(LidarFlowError, ValueError):
    pass


class NonFiniteLossError(LidarFlowError, FloatingPointError):
    pass
