"""Exception types. Pipeline stages tag errors with their stage name."""


class HarmError(Exception):
    """Base class for all package errors."""

    stage = None


class MeshParseError(HarmError):
    stage = "mesh"


class MeshTopologyError(HarmError):
    stage = "mesh"


class EmptyBoundaryError(MeshTopologyError):
    pass


class ResolutionError(HarmError):
    stage = "mesh"


class MetricError(HarmError):
    """Metric is not symmetric positive definite, or bad family parameters."""

    stage = "metric"


class DegenerateGeometryError(HarmError):
    stage = "metric"


class QuadratureError(HarmError):
    stage = "fem"


class SolverError(HarmError):
    stage = "fem"

    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


class MeanValueError(HarmError):
    stage = "fem"


class TopologyError(HarmError):
    """Boundary is not a connected 2-sphere."""

    stage = "uniformize"


class FlowDivergenceError(HarmError):
    stage = "uniformize"


class ConfigError(HarmError):
    stage = "config"
