"""Exception and warning types shared across the package."""

from typing import Any, Optional, Sequence


class SegpError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SegpError, ValueError):
    """Raised when a configuration file or override is invalid."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.errors))


class GraphError(SegpError):
    """Raised when a computation graph cannot be built or evaluated."""


class ShapeError(GraphError, ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, node_index: int, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.node_index = node_index
        self.op = op
        self.shapes = list(shapes)
        message = f"node {node_index} ({op}): incompatible shapes {self.shapes}"
        if detail:
            message += f" - {detail}"
        super().__init__(message)


class UnboundLeafError(GraphError, KeyError):
    """Raised when a leaf has no value in the bindings."""


class NonScalarRootError(GraphError, ValueError):
    """Raised when a gradient is requested for a non-scalar root."""


class UnknownClassError(SegpError, KeyError):
    """Raised when a class id has not been registered with the text tower."""


class MissingPrototypeError(SegpError, KeyError):
    """Raised when a prototype is requested for a class the bank does not hold."""


class InvalidDistributionError(SegpError, ValueError):
    """Raised when a probability vector is malformed."""


class MetricError(SegpError, ValueError):
    """Raised when a continual-learning metric is undefined for the inputs."""


class EmptyDatasetError(SegpError, ValueError):
    """Raised when an operation needs samples and receives none."""


class ExemplarAccessError(SegpError):
    """Raised when a stage asks for another task's training split."""


class StageFailure(SegpError):
    """A run stage raised; the partial record collected so far is attached."""

    def __init__(self, stage: int, cause: BaseException, partial_record: Optional[Any] = None):
        self.stage = stage
        self.cause = cause
        self.partial_record = partial_record
        super().__init__(f"stage {stage} failed: {cause}")


class DegenerateNormWarning(RuntimeWarning):
    """An l2-normalize input had (near) zero norm."""


class ReliabilityFallbackWarning(RuntimeWarning):
    """Anchor reliability scores did not sum to a positive value."""


class DegenerateTransferWarning(RuntimeWarning):
    """A transferred prototype collapsed to (near) zero norm and was kept."""
