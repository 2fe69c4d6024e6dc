"""
Shared pytest fixtures for the surrogate test suite.

Everything here is toy-sized so the property tests run on CPU in seconds:
small configs, untrained models, and synthetic travelling-wave datasets that
don't require running the solvers.
"""

import numpy as np
import pytest
import torch

from src.config import (
    EncoderDecoderConfig,
    ExperimentConfig,
    RefinerConfig,
    TrainConfig,
)
from src.dataio import NormStats, TrajectoryDataset

# ============================================================
# Configurations
# ============================================================


def tiny_model_config(**overrides) -> EncoderDecoderConfig:
    """Encoder-decoder small enough for finite-difference checks."""
    values = dict(
        input_dim=1,
        output_dim=1,
        hidden_dim=16,
        num_self_attentions=1,
        num_latents=4,
        latent_dim=2,
        latent_heads=2,
        latent_dim_head=8,
        cross_heads=2,
        cross_dim_head=8,
        dim=16,
        depth_inr=2,
        frequencies=[2, 3],
        num_freq_samples=4,
        feature_dim=4,
        max_encoding_freq=3.0,
    )
    values.update(overrides)
    return EncoderDecoderConfig(**values)


def tiny_refiner_config(**overrides) -> RefinerConfig:
    values = dict(
        hidden_size=16,
        depth=1,
        num_heads=2,
        mlp_ratio=2.0,
        denoising_steps=3,
        min_noise=1e-2,
        mlp_hidden=16,
    )
    values.update(overrides)
    return RefinerConfig(**values)


def tiny_experiment(stepper: str = "diffusion", **train_overrides) -> ExperimentConfig:
    stage = dict(epochs=2, batch_size=2, checkpoint_every=1, seed=0)
    stage.update(train_overrides)
    return ExperimentConfig(
        preset="burgers",
        model=tiny_model_config(),
        refiner=tiny_refiner_config(stepper=stepper),
        train_autoencoder=TrainConfig(stage="autoencoder", **stage),
        train_refiner=TrainConfig(stage="refiner", **stage),
    )


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def refiner_config():
    return tiny_refiner_config()


@pytest.fixture
def experiment_config():
    return tiny_experiment()


# ============================================================
# Synthetic data
# ============================================================


def travelling_wave_dataset(
    n_traj: int = 6, n_time: int = 6, n_points: int = 32, n_train: int = 4, seed: int = 0
) -> TrajectoryDataset:
    """u(x, t) = sin(2 pi (x - 0.05 t) + phase_i) on a regular 1D grid."""
    rng = np.random.default_rng(seed)
    x = np.arange(n_points) / n_points
    t = np.arange(n_time)
    phases = rng.uniform(0, 2 * np.pi, size=n_traj)
    u = np.sin(2 * np.pi * (x[None, None, :] - 0.05 * t[None, :, None]) + phases[:, None, None])
    coords = np.broadcast_to(x[None, :, None], (n_traj, n_points, 1))
    return TrajectoryDataset(
        u=u[..., None].astype(np.float32),
        coords=np.array(coords, dtype=np.float32),
        times=t.astype(np.float32),
        manifest={
            "equation": "synthetic",
            "splits": {
                "train": list(range(n_train)),
                "test": list(range(n_train, n_traj)),
            },
        },
    )


@pytest.fixture
def wave_dataset():
    return travelling_wave_dataset()


@pytest.fixture
def wave_dir(tmp_path, wave_dataset):
    """The synthetic dataset written to disk."""
    return wave_dataset.save(tmp_path / "data")


# ============================================================
# Models and pipelines
# ============================================================


@pytest.fixture
def autoencoder(model_config):
    from src.autoencoder import AutoEncoder

    torch.manual_seed(0)
    return AutoEncoder(model_config).eval()


def make_pipeline(stepper: str = "diffusion", seed: int = 0, **model_overrides):
    """Untrained autoencoder + refiner bundled like a loaded checkpoint."""
    from evaluation.rollout import Pipeline
    from src.autoencoder import AutoEncoder
    from src.refiner import LatentRefiner

    torch.manual_seed(seed)
    config = tiny_model_config(**model_overrides)
    refiner_config = tiny_refiner_config(stepper=stepper)
    refiner = LatentRefiner(config.latent_dim, config.num_latents, refiner_config)
    return Pipeline(
        autoencoder=AutoEncoder(config).eval(),
        stats=NormStats.identity(config.output_dim),
        config={"model": config.model_dump(), "refiner": refiner_config.model_dump()},
        refiner=refiner.eval(),
    )


@pytest.fixture
def pipeline():
    return make_pipeline()


@pytest.fixture(scope="session")
def trained_checkpoints(tmp_path_factory):
    """Two-epoch autoencoder and refiner archives on the synthetic dataset."""
    from src.training import train_autoencoder, train_refiner

    root = tmp_path_factory.mktemp("trained")
    dataset = travelling_wave_dataset()
    config = tiny_experiment()
    stage1 = train_autoencoder(dataset, config, root / "ae", progress=False)
    stage2 = train_refiner(dataset, stage1.archive_dir, config, root / "ref", progress=False)
    return {"dataset": dataset, "stage1": stage1, "stage2": stage2, "config": config}
