"""Exception hierarchy.

Validation problems (bad input, points outside a domain) derive from
``ValidationError``; numerical breakdowns derive from ``NumericalError``.
The CLI maps the two families to exit codes 1 and 2.
"""


class ScoreMeansError(Exception):
    pass


class ValidationError(ScoreMeansError, ValueError):
    pass


class DomainError(ValidationError):
    """Argument outside the domain of an operation (e.g. ``t <= 0``)."""


class CutLocusError(DomainError):
    pass


class UnsupportedOperationError(ScoreMeansError, NotImplementedError):
    pass


class NoOracleError(UnsupportedOperationError):
    pass


class NumericalError(ScoreMeansError, ArithmeticError):
    pass


class DegenerateMetricError(NumericalError):
    pass


class IntegrationError(NumericalError):
    pass


class SeriesConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Optimizer produced non-finite iterates. ``trace`` holds what ran."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class TrainingError(NumericalError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
