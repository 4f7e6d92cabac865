"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status without string matching.
"""

from __future__ import annotations


class QosForecastError(Exception):
    exit_code = 2


# -- input / usage (exit 2) ---------------------------------------------------

class ParseError(QosForecastError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingColumn(QosForecastError):
    pass


class NonUniformGrid(QosForecastError):
    pass


class AllRowsDropped(QosForecastError):
    pass


class EmptyFrame(QosForecastError):
    pass


class UnknownMetric(QosForecastError):
    pass


class FrameTooShort(QosForecastError):
    pass


class UnknownSeverity(QosForecastError):
    pass


class EmptySeries(QosForecastError):
    pass


class MissingQosMetric(QosForecastError):
    pass


class OutOfRange(QosForecastError):
    pass


class EmptySplit(QosForecastError):
    pass


class InvalidConfig(QosForecastError):
    pass


class Unsatisfiable(QosForecastError):
    pass


class VersionMismatch(QosForecastError):
    pass


class CorruptFile(QosForecastError):
    pass


# -- numeric (exit 3) ---------------------------------------------------------

class NumericError(QosForecastError):
    exit_code = 3


class ShapeMismatch(NumericError):
    pass


class DomainError(NumericError):
    pass


class NotScalar(NumericError):
    pass


class MissingGrad(NumericError):
    pass


class InvalidMixture(NumericError):
    pass


class EmptyBatch(NumericError):
    pass


class DivergedLoss(NumericError):
    pass


# -- calibration (exit 4) -----------------------------------------------------

class SingleClass(QosForecastError):
    exit_code = 4
