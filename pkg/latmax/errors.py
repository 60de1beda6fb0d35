"""Exception hierarchy; every error carries the CLI exit code it maps to."""


class LatmaxError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidInputError(LatmaxError, ValueError):
    """Arguments or data outside the documented domain"""

    exit_code = 2


class NumericError(LatmaxError):
    exit_code = 3


class NotPSDError(NumericError):
    pass


class QuadratureError(NumericError):
    pass


class DegenerateCovarianceError(NumericError):
    """Sampler produced no local maxima within its attempt budget"""


class SmoothingError(NumericError):
    pass


class FileFormatError(LatmaxError):
    exit_code = 4
