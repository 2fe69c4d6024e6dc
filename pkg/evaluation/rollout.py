"""
Autoregressive forecasting with a trained checkpoint.

One encode of u0, ``n_steps`` latent steps, and a decode of every step on the
query grid. Latent dynamics never depend on the query grid.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
from tqdm import tqdm

from src.archive import load_archive, weights_digest
from src.autoencoder import AutoEncoder, as_tensor
from src.config import RefinerConfig
from src.dataio import NormStats
from src.errors import ConfigError, DependencyError, RefinerNumericalError
from src.refiner import LatentRefiner, NoiseSchedule
from src.training import load_autoencoder

from . import RolloutResult, UncertaintyResult

logger = logging.getLogger(__name__)


@dataclass
class Pipeline:
    autoencoder: AutoEncoder
    stats: NormStats
    config: Dict[str, Any]
    refiner: Optional[LatentRefiner] = None
    device: str = "cpu"

    @property
    def mode(self) -> Optional[str]:
        return None if self.refiner is None else self.refiner.kind

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return self.stats.apply(np.asarray(values))

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return self.stats.invert(np.asarray(values))


def load_pipeline(ckpt: str | Path, device: str = "cpu") -> Pipeline:
    """Autoencoder (and refiner, when present) from a checkpoint archive."""
    autoencoder, stats, config = load_autoencoder(ckpt, device)
    archive = load_archive(ckpt)
    expected = archive.extra.get("encoder_digest")
    if expected is not None and weights_digest(autoencoder) != expected:
        raise DependencyError(
            "Encoder weights do not match the digest recorded with the refiner", path=str(ckpt)
        )
    refiner = None
    if archive.has("refiner"):
        refiner_config = RefinerConfig.model_validate(config["refiner"])
        refiner = LatentRefiner(
            autoencoder.config.latent_dim, autoencoder.config.num_latents, refiner_config
        )
        archive.load_into("refiner", refiner)
        if "schedule" in archive.extra:
            refiner.schedule = NoiseSchedule.from_dict(archive.extra["schedule"])
        refiner.to(device).eval()
    return Pipeline(
        autoencoder=autoencoder, stats=stats, config=config, refiner=refiner, device=device
    )


def _batched(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    return array[None] if array.ndim == 2 else array


def encode(pipeline: Pipeline, coords: np.ndarray, values: np.ndarray) -> torch.Tensor:
    """Posterior means for raw-scale ``values`` [B, N, C]."""
    values = as_tensor(pipeline.normalize(_batched(values)), pipeline.device)
    coords = as_tensor(_batched(coords), pipeline.device).expand(values.shape[0], -1, -1)
    with torch.no_grad():
        return pipeline.autoencoder.encode(coords, values, sample=False).mu


def decode(
    pipeline: Pipeline, z: torch.Tensor, coords: np.ndarray, normalized: bool = False
) -> np.ndarray:
    with torch.no_grad():
        out = pipeline.autoencoder.decode(z, as_tensor(_batched(coords), pipeline.device))
    out = out.cpu().numpy()
    return out if normalized else pipeline.denormalize(out)


def rollout(
    pipeline: Pipeline,
    coords: np.ndarray,
    u0: np.ndarray,
    n_steps: int,
    query_coords: Optional[np.ndarray] = None,
    mode: Optional[str] = None,
    seed: int = 0,
    normalized: bool = False,
    progress: bool = False,
) -> RolloutResult:
    """Forecast ``n_steps`` frames from u0 observed on ``coords``.

    Fields are returned in raw units unless ``normalized`` is set.
    """
    if n_steps > 0 and pipeline.refiner is None:
        raise DependencyError("Checkpoint holds no refiner; only n_steps=0 is possible")
    if mode is not None and pipeline.refiner is not None and mode != pipeline.mode:
        raise ConfigError(
            f"Checkpoint stepper is {pipeline.mode!r}, requested {mode!r}",
            requested=mode,
            available=pipeline.mode,
        )
    query_coords = coords if query_coords is None else query_coords
    generator = torch.Generator().manual_seed(seed)

    z = encode(pipeline, coords, u0)
    latents = [z.cpu().numpy()]
    fields = [decode(pipeline, z, query_coords, normalized)]
    seconds = []
    truncated = False

    with torch.no_grad():
        for step in tqdm(range(n_steps), desc="rollout", leave=False, disable=not progress):
            start = time.perf_counter()
            try:
                z = pipeline.refiner.step(z, generator=generator)
            except RefinerNumericalError:
                z = torch.full_like(z, float("nan"))
            seconds.append(time.perf_counter() - start)
            if not torch.isfinite(z).all():
                logger.warning("Non-finite latents at step %d; truncating rollout", step + 1)
                truncated = True
                break
            latents.append(z.cpu().numpy())
            fields.append(decode(pipeline, z, query_coords, normalized))

    return RolloutResult(
        fields=np.stack(fields, axis=1),
        latents=np.stack(latents, axis=1),
        step_seconds=seconds,
        seed=seed,
        mode=pipeline.mode or "reconstruction",
        truncated=truncated,
        completed_steps=len(latents) - 1,
    )


def ensemble_uncertainty(
    pipeline: Pipeline,
    coords: np.ndarray,
    u0: np.ndarray,
    n_steps: int,
    n_samples: int,
    seed: int = 0,
    query_coords: Optional[np.ndarray] = None,
) -> UncertaintyResult:
    """Pointwise mean and std over ``n_samples`` rollouts with distinct seeds."""
    seeds = [seed + i for i in range(n_samples)]
    runs = [
        rollout(pipeline, coords, u0, n_steps, query_coords=query_coords, seed=s).fields
        for s in tqdm(seeds, desc="ensemble", leave=False)
    ]
    length = min(r.shape[1] for r in runs)
    samples = np.stack([r[:, :length] for r in runs])
    return UncertaintyResult(
        mean=samples.mean(axis=0), std=samples.std(axis=0), samples=samples, seeds=seeds
    )
