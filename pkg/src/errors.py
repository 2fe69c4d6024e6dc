"""
Exception hierarchy for the surrogate pipeline.

Every error carries a short machine-readable ``code`` so the command-line entry
point can emit it as JSON without knowing the concrete class.
"""

from typing import Any, Dict


class AromaLabError(Exception):
    """Base class for all pipeline errors."""

    code = "aroma_lab_error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def payload(self) -> Dict[str, Any]:
        """JSON-serializable description of the failure."""
        return {
            "error": type(self).__name__,
            "code": self.code,
            "message": self.message,
            "context": {k: _jsonable(v) for k, v in self.context.items()},
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


class ConfigError(AromaLabError):
    code = "config_error"


class DependencyError(AromaLabError):
    code = "dependency_error"


class DatasetError(AromaLabError):
    code = "dataset_error"


# datagen


class SolverDiverged(AromaLabError):
    code = "solver_diverged"

    def __init__(self, trajectory_index: int, step: int | None = None):
        super().__init__(
            f"Non-finite values in trajectory {trajectory_index}",
            trajectory_index=trajectory_index,
            step=step,
        )
        self.trajectory_index = trajectory_index


class GridTooSparse(AromaLabError):
    code = "grid_too_sparse"


# dataio


class InvalidWindow(AromaLabError):
    code = "invalid_window"


class NoPairsAvailable(AromaLabError):
    code = "no_pairs_available"


# encoder / decoder


class DomainError(AromaLabError):
    code = "domain_error"


class EmptyObservationSet(AromaLabError):
    code = "empty_observation_set"


class EncoderNumericalError(AromaLabError):
    code = "encoder_numerical_error"


class InvalidRatio(AromaLabError):
    code = "invalid_ratio"


# refiner


class InvalidSchedule(AromaLabError):
    code = "invalid_schedule"


class RefinerNumericalError(AromaLabError):
    code = "refiner_numerical_error"


# training


class TrainingDiverged(AromaLabError):
    code = "training_diverged"
