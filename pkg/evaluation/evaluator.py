"""
Main evaluation orchestrator.

Scores a checkpoint on the test split: reconstruction, rollout relative L2,
In-t / Out-t MSE and correlation over time, then builds a text report and a
JSON-ready summary.
"""

import time
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.dataio import TrajectoryDataset, slice_subtrajectories
from src.errors import ConfigError

from . import EvaluationResult
from .metrics import correlation_over_time, horizon_mse, relative_l2
from .rollout import Pipeline, rollout


class SurrogateEvaluator:
    """
    Evaluates a trained pipeline trajectory by trajectory.

    Usage:
        evaluator = SurrogateEvaluator(pipeline, test_data, t0=0)
        results = evaluator.evaluate_dataset()
        print(evaluator.generate_report(results))
    """

    def __init__(
        self,
        pipeline: Pipeline,
        dataset: TrajectoryDataset,
        t0: int = 0,
        n_steps: Optional[int] = None,
        window: Optional[int] = None,
        boundary: Optional[int] = None,
        normalized_mse: bool = False,
        seed: int = 0,
        batch_size: int = 16,
    ):
        if window is not None:
            dataset = slice_subtrajectories(dataset, window)
        if not 0 <= t0 < dataset.n_time:
            raise ConfigError(f"t0 {t0} outside the {dataset.n_time}-frame trajectories")
        self.dataset = dataset
        self.pipeline = pipeline
        self.t0 = t0
        available = dataset.n_time - 1 - t0
        self.n_steps = available if n_steps is None else min(n_steps, available)
        self.boundary = boundary
        self.normalized_mse = normalized_mse
        self.seed = seed
        self.batch_size = batch_size
        self.curves: List[np.ndarray] = []

    def _truth(self, items: np.ndarray) -> np.ndarray:
        return self.dataset.u[items, self.t0 : self.t0 + self.n_steps + 1]

    def evaluate_batch(self, items: np.ndarray) -> List[EvaluationResult]:
        coords = self.dataset.coords[items]
        truth = self._truth(items)

        start = time.time()
        if self.pipeline.refiner is None:
            result = rollout(self.pipeline, coords, truth[:, 0], 0, seed=self.seed)
            pred = result.fields
            truth = truth[:, :1]
        else:
            result = rollout(self.pipeline, coords, truth[:, 0], self.n_steps, seed=self.seed)
            pred = result.fields
            truth = truth[:, : pred.shape[1]]
        latency = (time.time() - start) / len(items)

        # Reconstruction of every frame through the autoencoder alone
        recon = np.stack(
            [
                rollout(self.pipeline, coords, truth[:, t], 0).fields[:, 0]
                for t in range(truth.shape[1])
            ],
            axis=1,
        )

        if self.normalized_mse:
            pred_mse, truth_mse = self.pipeline.normalize(pred), self.pipeline.normalize(truth)
        else:
            pred_mse, truth_mse = pred, truth

        results = []
        for row, item in enumerate(items):
            sl = slice(row, row + 1)
            corr = correlation_over_time(pred[sl], truth[sl])
            self.curves.append(corr.curve)
            results.append(
                EvaluationResult(
                    item=int(item),
                    reconstruction_l2=relative_l2(recon[sl], truth[sl]),
                    rollout_l2=relative_l2(pred[sl], truth[sl]),
                    in_t_mse=horizon_mse(pred_mse[sl], truth_mse[sl], "In-t", self.boundary),
                    out_t_mse=horizon_mse(pred_mse[sl], truth_mse[sl], "Out-t", self.boundary),
                    high_corr_step=corr.high_corr_step,
                    latency_seconds=latency,
                    details={"truncated": result.truncated, "steps": result.completed_steps},
                )
            )
        return results

    def evaluate_dataset(self, items: Optional[List[int]] = None) -> List[EvaluationResult]:
        items = np.arange(self.dataset.n_trajectories) if items is None else np.asarray(items)
        print(
            f"Evaluating {len(items)} trajectories: t0={self.t0}, {self.n_steps} steps, "
            f"stepper={self.pipeline.mode or 'none'}"
        )
        results: List[EvaluationResult] = []
        for start in range(0, len(items), self.batch_size):
            results.extend(self.evaluate_batch(items[start : start + self.batch_size]))
        return results

    def correlation_curve(self) -> np.ndarray:
        """Item-averaged correlation curve of everything evaluated so far."""
        if not self.curves:
            return np.zeros(0)
        return np.nanmean(np.stack(self.curves), axis=0)

    def summary(self, results: List[EvaluationResult]) -> Dict[str, float]:
        frame = self.to_frame(results)
        return {
            "relative_l2": float(frame["rollout_l2"].mean()),
            "reconstruction_relative_l2": float(frame["reconstruction_l2"].mean()),
            "in_t_mse": float(frame["in_t_mse"].mean()),
            "out_t_mse": float(frame["out_t_mse"].mean()),
            "high_corr_step": float(frame["high_corr_step"].mean()),
            "n_items": len(results),
            "n_steps": self.n_steps,
            "t0": self.t0,
        }

    @staticmethod
    def to_frame(results: List[EvaluationResult]) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "item": r.item,
                    "reconstruction_l2": r.reconstruction_l2,
                    "rollout_l2": r.rollout_l2,
                    "in_t_mse": r.in_t_mse,
                    "out_t_mse": r.out_t_mse,
                    "high_corr_step": r.high_corr_step,
                    "latency_seconds": r.latency_seconds,
                    "truncated": r.details.get("truncated", False),
                }
                for r in results
            ]
        )

    def generate_report(self, results: List[EvaluationResult], model_name: str = None) -> str:
        """Generate a human-readable evaluation report."""
        report = []
        header = "EVALUATION REPORT"
        if model_name:
            header += f" - Model: {model_name}"
        report.append(header)
        report.append("=" * len(header))
        if not results:
            report.append("\nNo trajectories evaluated.")
            return "\n".join(report)

        summary = self.summary(results)
        truncated = sum(1 for r in results if r.details.get("truncated"))
        report.append("\nSummary:")
        report.append(f"  Trajectories: {summary['n_items']} (truncated rollouts: {truncated})")
        report.append(f"  Rollout: t0={self.t0}, {self.n_steps} steps")
        report.append(f"  Reconstruction relative L2: {summary['reconstruction_relative_l2']:.4e}")
        report.append(f"  Rollout relative L2: {summary['relative_l2']:.4e}")
        report.append(f"  In-t MSE: {summary['in_t_mse']:.4e}")
        report.append(f"  Out-t MSE: {summary['out_t_mse']:.4e}")
        report.append(f"  Mean high-correlation step: {summary['high_corr_step']:.1f}")

        report.append("\nWorst trajectories:")
        for result in sorted(results, key=lambda r: -np.nan_to_num(r.rollout_l2))[:5]:
            report.append(
                f"  #{result.item}: rollout L2 {result.rollout_l2:.3e} | "
                f"recon L2 {result.reconstruction_l2:.3e} | "
                f"corr >= 0.8 until step {result.high_corr_step}"
            )
        return "\n".join(report)
