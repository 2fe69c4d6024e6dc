"""
Evaluation framework for latent-token PDE surrogates.

This package turns trained checkpoints into forecasts and scores:
- Rollouts: encode once, step in latent space, decode on any query grid
- Metrics: relative L2, In-t / Out-t MSE, correlation over time, spectra
- Analysis: attention maps, token perturbation, latent dumps, encoding cost
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np


@dataclass
class RolloutResult:
    """Decoded fields and latents for steps 0..n_steps (step 0 reconstructs u0)."""

    fields: np.ndarray  # [B, n_steps + 1, Q, C]
    latents: np.ndarray  # [B, n_steps + 1, M, h]
    step_seconds: List[float]
    seed: int
    mode: str
    truncated: bool = False
    completed_steps: int = 0

    @property
    def n_steps(self) -> int:
        return self.fields.shape[1] - 1


@dataclass
class UncertaintyResult:
    mean: np.ndarray  # [B, n_steps + 1, Q, C]
    std: np.ndarray
    samples: np.ndarray  # [n_samples, B, n_steps + 1, Q, C]
    seeds: List[int]


@dataclass
class EvaluationResult:
    """Scores for one test trajectory."""

    item: int
    reconstruction_l2: float
    rollout_l2: float
    in_t_mse: float
    out_t_mse: float
    high_corr_step: int
    latency_seconds: float
    details: Dict[str, Any] = field(default_factory=dict)


from .evaluator import SurrogateEvaluator  # noqa: E402
from .rollout import Pipeline, ensemble_uncertainty, load_pipeline, rollout  # noqa: E402

__all__ = [
    "EvaluationResult",
    "Pipeline",
    "RolloutResult",
    "SurrogateEvaluator",
    "UncertaintyResult",
    "ensemble_uncertainty",
    "load_pipeline",
    "rollout",
]
