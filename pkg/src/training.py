"""
Two-stage training.

Stage 1 fits the encoder and decoder as a VAE (reconstruction MSE plus a
weighted KL term). Stage 2 freezes them and fits a latent stepper on pairs of
encoded successive states. Both stages share ``StageTrainer``: AdamW with a
cosine learning-rate schedule, a held-out validation split, periodic
checkpoints that keep the best validation score, and an abort on NaN losses.
"""

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .archive import load_archive, save_archive, weights_digest
from .autoencoder import AutoEncoder, as_tensor
from .config import EncoderDecoderConfig, ExperimentConfig, TrainConfig
from .dataio import (
    NormStats,
    TrajectoryDataset,
    apply_normalization,
    enumerate_pairs,
    fit_normalization,
    gather_pairs,
    slice_subtrajectories,
    split_indices,
)
from .errors import DependencyError, TrainingDiverged
from .refiner import LatentRefiner

logger = logging.getLogger(__name__)


# ============================================================
# Losses and schedules
# ============================================================


def kl_divergence(mu: torch.Tensor, logsigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over tokens and channels, mean over batch."""
    if mu.dim() == 2:
        mu, logsigma = mu.unsqueeze(0), logsigma.unsqueeze(0)
    per_element = 0.5 * (mu**2 + torch.exp(2.0 * logsigma) - 1.0 - 2.0 * logsigma)
    return per_element.flatten(1).sum(dim=1).mean()


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """lr_max at epoch 0, annealed to lr_min at the final epoch."""
    if epochs <= 1:
        return lr_max
    progress = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingResult:
    archive_dir: Path
    history: pd.DataFrame
    best_epoch: int
    best_validation: float


# ============================================================
# Shared loop
# ============================================================


class StageTrainer:
    """Optimizer, LR schedule, checkpointing and divergence handling for one stage."""

    def __init__(
        self,
        name: str,
        model: nn.Module,
        config: TrainConfig,
        out_dir: str | Path,
        save_fn: Callable[[Path], Path],
    ):
        self.name = name
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir)
        self.save_fn = save_fn

        weight_decay = config.weight_decay if config.regularization == "l2-ae" else 0.0
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            params, lr=config.lr_max, betas=(0.9, 0.999), weight_decay=weight_decay
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer,
            lambda e: cosine_lr(e, config.epochs, config.lr_max, config.lr_min) / config.lr_max,
        )
        self.history: List[Dict[str, float]] = []
        self.best_validation = math.inf
        self.best_epoch = -1
        self._last_good = copy.deepcopy(model.state_dict())

    @property
    def best_dir(self) -> Path:
        return self.out_dir / self.name

    def step(self, loss: torch.Tensor) -> None:
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

    def end_epoch(
        self,
        epoch: int,
        losses: List[Dict[str, float]],
        validate: Callable[[], float],
    ) -> Dict[str, float]:
        summary = pd.DataFrame(losses).mean().to_dict()
        if not all(math.isfinite(v) for v in summary.values()):
            self._abort(epoch)

        row = {"epoch": epoch, "lr": self.optimizer.param_groups[0]["lr"], **summary}
        is_checkpoint = (epoch + 1) % self.config.checkpoint_every == 0
        if is_checkpoint or epoch == self.config.epochs - 1:
            row["validation"] = validate()
            if math.isnan(row["validation"]):
                # no held-out trajectories
                row["validation"] = summary.get("loss", math.nan)
            if row["validation"] < self.best_validation or self.best_epoch < 0:
                self.best_validation = row["validation"]
                self.best_epoch = epoch
                self.save_fn(self.best_dir)
        else:
            row["validation"] = math.nan

        self._last_good = copy.deepcopy(self.model.state_dict())
        self.history.append(row)
        self.scheduler.step()
        logger.debug("%s epoch %d: %s", self.name, epoch, row)
        return row

    def _abort(self, epoch: int) -> None:
        self.model.load_state_dict(self._last_good)
        path = self.save_fn(self.out_dir / f"{self.name}_last_good")
        self.write_history()
        raise TrainingDiverged(
            f"{self.name} loss became NaN at epoch {epoch}",
            epoch=epoch,
            checkpoint=str(path),
        )

    def write_history(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.history)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(self.out_dir / f"loss_{self.name}.csv", index=False)
        return frame

    def result(self) -> TrainingResult:
        return TrainingResult(
            archive_dir=self.best_dir,
            history=self.write_history(),
            best_epoch=self.best_epoch,
            best_validation=self.best_validation,
        )


def _seed_everything(seed: int) -> Tuple[np.random.Generator, torch.Generator]:
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    return np.random.default_rng(seed), generator


def _training_view(dataset: TrajectoryDataset) -> TrajectoryDataset:
    if "train" in dataset.manifest.get("splits", {}):
        return dataset.split("train")
    return dataset


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def model_config_for(config: EncoderDecoderConfig, dataset: TrajectoryDataset):
    """Match input/output dimensions to the dataset."""
    return config.model_copy(
        update={"input_dim": dataset.spatial_dim, "output_dim": dataset.n_channels}
    )


# ============================================================
# Stage 1
# ============================================================


def _reconstruction_error(
    model: AutoEncoder, dataset: TrajectoryDataset, indices: np.ndarray, horizon: int, device
) -> float:
    """MSE over every frame inside the horizon of the given trajectories."""
    model.eval()
    errors = []
    with torch.no_grad():
        for traj in indices:
            coords = as_tensor(dataset.coords[traj], device).expand(horizon, -1, -1)
            values = as_tensor(dataset.u[traj, :horizon], device)
            recon, _ = model(coords, values)
            errors.append(F.mse_loss(recon, values).item())
    model.train()
    return float(np.mean(errors)) if errors else math.nan


def train_autoencoder(
    dataset: TrajectoryDataset,
    config: ExperimentConfig,
    out_dir: str | Path,
    progress: bool = True,
) -> TrainingResult:
    """Fit encoder + decoder; the archive lands in ``out_dir/autoencoder``."""
    tc = config.train_autoencoder
    np_rng, generator = _seed_everything(tc.seed)
    device = torch.device(tc.device)

    train_data = _training_view(dataset)
    stats = fit_normalization(train_data.u)
    train_data = apply_normalization(train_data, stats)
    if tc.window is not None:
        train_data = slice_subtrajectories(train_data, tc.window)
    horizon = train_data.n_time if tc.horizon is None else min(tc.horizon, train_data.n_time)

    train_idx, val_idx = split_indices(
        train_data.n_trajectories, tc.validation_fraction, tc.seed
    )
    model_config = model_config_for(config.model, train_data)
    model = AutoEncoder(model_config).to(device)
    vae = tc.regularization == "vae"

    def save(path: Path) -> Path:
        return save_archive(
            path,
            {"encoder": model.encoder, "decoder": model.decoder},
            config={
                "preset": config.preset,
                "model": model_config.model_dump(),
                "train_autoencoder": tc.model_dump(),
            },
            extra={"stage": "autoencoder", "normalization": stats.to_dict()},
        )

    trainer = StageTrainer("autoencoder", model, tc, out_dir, save)
    print(
        f"Training autoencoder on {len(train_idx)} trajectories "
        f"({len(val_idx)} held out), {tc.epochs} epochs"
    )
    model.train()
    epochs = tqdm(range(tc.epochs), desc="autoencoder", disable=not progress)
    for epoch in epochs:
        losses = []
        for batch in _batches(train_idx, tc.batch_size, np_rng):
            t = np_rng.integers(0, horizon, size=len(batch))
            coords = as_tensor(train_data.coords[batch], device)
            values = as_tensor(train_data.u[batch, t], device)

            recon, latents = model(
                coords, values, dropout=tc.dropout_sequence, generator=generator, sample=vae
            )
            recon_loss = F.mse_loss(recon, values)
            kl = kl_divergence(latents.mu, latents.logsigma)
            loss = recon_loss + tc.kl_weight * kl if vae else recon_loss
            if torch.isfinite(loss):
                trainer.step(loss)
            losses.append({"loss": loss.item(), "recon": recon_loss.item(), "kl": kl.item()})

        row = trainer.end_epoch(
            epoch,
            losses,
            lambda: _reconstruction_error(model, train_data, val_idx, horizon, device),
        )
        epochs.set_postfix(loss=f"{row['loss']:.3e}")

    result = trainer.result()
    print(f"Best validation MSE {result.best_validation:.4e} at epoch {result.best_epoch}")
    return result


# ============================================================
# Stage 2
# ============================================================


def load_autoencoder(ckpt: str | Path, device="cpu") -> Tuple[AutoEncoder, NormStats, dict]:
    """Rebuild the frozen encoder/decoder from a stage-1 (or stage-2) archive."""
    try:
        archive = load_archive(ckpt)
    except DependencyError as e:
        raise DependencyError(
            f"Stage-1 checkpoint missing: {e.message}", path=str(ckpt)
        ) from e
    if not (archive.has("encoder") and archive.has("decoder")):
        raise DependencyError("Checkpoint holds no encoder/decoder weights", path=str(ckpt))
    model_config = EncoderDecoderConfig.model_validate(archive.config["model"])
    model = AutoEncoder(model_config)
    archive.load_into("encoder", model.encoder)
    archive.load_into("decoder", model.decoder)
    stats = NormStats.from_dict(archive.extra["normalization"])
    return model.to(device).eval(), stats, archive.config


def _one_step_latent_error(
    autoencoder: AutoEncoder,
    refiner: LatentRefiner,
    dataset: TrajectoryDataset,
    pairs: np.ndarray,
    device,
    seed: int,
) -> float:
    if len(pairs) == 0:
        return math.nan
    refiner.eval()
    generator = torch.Generator().manual_seed(seed)
    batch = gather_pairs(dataset, pairs)
    with torch.no_grad():
        coords = as_tensor(batch.coords, device)
        mu_t = autoencoder.encode(coords, as_tensor(batch.u_t, device), sample=False).mu
        mu_next = autoencoder.encode(coords, as_tensor(batch.u_next, device), sample=False).mu
        error = F.mse_loss(refiner.step(mu_t, generator=generator), mu_next).item()
    refiner.train()
    return error


def train_refiner(
    dataset: TrajectoryDataset,
    encoder_ckpt: str | Path,
    config: ExperimentConfig,
    out_dir: str | Path,
    progress: bool = True,
) -> TrainingResult:
    """Fit the latent stepper on a frozen encoder; archive in ``out_dir/refiner``."""
    tc = config.train_refiner
    np_rng, generator = _seed_everything(tc.seed)
    device = torch.device(tc.device)

    autoencoder, stats, ae_config = load_autoencoder(encoder_ckpt, device)
    for p in autoencoder.parameters():
        p.requires_grad_(False)
    frozen_digest = weights_digest(autoencoder)

    train_data = apply_normalization(_training_view(dataset), stats)
    if tc.window is not None:
        train_data = slice_subtrajectories(train_data, tc.window)
    horizon = train_data.n_time if tc.horizon is None else min(tc.horizon, train_data.n_time)
    train_idx, val_idx = split_indices(
        train_data.n_trajectories, tc.validation_fraction, tc.seed
    )
    # raises NoPairsAvailable before the refiner is built
    enumerate_pairs(train_data, horizon, train_idx)
    val_pairs = (
        enumerate_pairs(train_data, horizon, val_idx)[:256] if len(val_idx) else np.zeros((0, 2))
    )

    model_config = autoencoder.config
    refiner = LatentRefiner(model_config.latent_dim, model_config.num_latents, config.refiner)
    refiner.to(device)
    # Diffusion trains on posterior samples; the ablation steppers regress the means.
    use_samples = refiner.kind == "diffusion"

    def check_frozen() -> None:
        if weights_digest(autoencoder) != frozen_digest:
            raise TrainingDiverged(
                "Frozen encoder/decoder weights changed during refiner training",
                checkpoint=str(encoder_ckpt),
            )

    def save(path: Path) -> Path:
        check_frozen()
        return save_archive(
            path,
            {"encoder": autoencoder.encoder, "decoder": autoencoder.decoder, "refiner": refiner},
            config={
                **ae_config,
                "refiner": config.refiner.model_dump(),
                "train_refiner": tc.model_dump(),
            },
            extra={
                "stage": "refiner",
                "normalization": stats.to_dict(),
                "schedule": refiner.schedule.to_dict(),
                "encoder_digest": frozen_digest,
                "source_checkpoint": str(encoder_ckpt),
            },
        )

    trainer = StageTrainer("refiner", refiner, tc, out_dir, save)
    print(
        f"Training {refiner.kind} refiner on {len(train_idx)} trajectories "
        f"(horizon {horizon}), {tc.epochs} epochs"
    )
    refiner.train()
    epochs = tqdm(range(tc.epochs), desc="refiner", disable=not progress)
    for epoch in epochs:
        losses = []
        for batch in _batches(train_idx, tc.batch_size, np_rng):
            t = np_rng.integers(0, horizon - 1, size=len(batch))
            pairs = gather_pairs(train_data, np.stack([batch, t], axis=1))
            coords = as_tensor(pairs.coords, device)
            with torch.no_grad():
                lat_t = autoencoder.encode(
                    coords, as_tensor(pairs.u_t, device), sample=use_samples, generator=generator
                )
                lat_next = autoencoder.encode(
                    coords,
                    as_tensor(pairs.u_next, device),
                    sample=use_samples,
                    generator=generator,
                )
            loss = refiner.loss(lat_t.z, lat_next.z, generator=generator)
            if torch.isfinite(loss):
                trainer.step(loss)
            losses.append({"loss": loss.item()})

        row = trainer.end_epoch(
            epoch,
            losses,
            lambda: _one_step_latent_error(
                autoencoder, refiner, train_data, val_pairs, device, tc.seed
            ),
        )
        epochs.set_postfix(loss=f"{row['loss']:.3e}")

    check_frozen()
    result = trainer.result()
    print(f"Best one-step latent MSE {result.best_validation:.4e} at epoch {result.best_epoch}")
    return result

