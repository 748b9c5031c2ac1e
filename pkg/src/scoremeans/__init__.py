"""Score-based estimation of means, log maps and distances on manifolds."""

from .errors import (
    CutLocusError,
    DegenerateMetricError,
    DivergenceError,
    DomainError,
    IntegrationError,
    NoOracleError,
    NumericalError,
    ScoreMeansError,
    SeriesConvergenceError,
    TrainingError,
    UnsupportedOperationError,
    ValidationError,
)
from .manifold import ManifoldId, MetricData, Point, TangentVector, get_manifold

__version__ = "0.1.0"
