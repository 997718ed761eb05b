"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage/config, 2 data, 3 runtime-numeric.
"""


class GFEError(Exception):
    exit_code = 1


class ConfigError(GFEError, ValueError):
    exit_code = 1


class ShapeError(GFEError, ValueError):
    exit_code = 1


class SizeError(ShapeError):
    """Image smaller than a filter window."""


class RangeError(GFEError, ValueError):
    exit_code = 2


class DataError(GFEError):
    exit_code = 2


class ImageReadError(DataError, OSError):
    pass


class FormatError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class MissingDonorError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CheckpointError(DataError):
    pass


class ConsistencyError(GFEError, RuntimeError):
    exit_code = 3


class ScheduleError(GFEError, ValueError):
    exit_code = 1


class NonFiniteLossError(GFEError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, terms=None, grad_norms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
        self.grad_norms = dict(grad_norms or {})
