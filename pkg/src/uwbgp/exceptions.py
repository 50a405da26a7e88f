"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`UwbGpError`, so callers (and the CLI) can separate numerical and
input failures from programming bugs.
"""


class UwbGpError(Exception):
    """Base class for all package errors."""


class InputError(UwbGpError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(UwbGpError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


# spline_trajectory
class NonUniformKnots(InputError):
    pass


class TooFewControlPoses(InputError):
    pass


class OutOfDomain(InputError):
    pass


class NonMonotoneTimestamps(InputError):
    pass


class DegenerateSystem(NumericalError):
    pass


# gp_core
class NotPositiveDefinite(NumericalError):
    pass


class DimensionMismatch(InputError):
    pass


# anchor_calibration
class EmptyInput(InputError):
    pass


class DegenerateBox(InputError):
    pass


class TooFewSamples(InputError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class GpFitFailure(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


# zone_localizer / metrics
class EmptyAnchors(InputError):
    pass


class UnknownAnchorId(InputError, KeyError):
    pass


class MissingTruth(InputError, KeyError):
    pass


class ParseError(InputError):
    """Unreadable text input; carries the offending file and line."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
