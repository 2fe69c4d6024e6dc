"""
Configuration models for data generation, model architecture and training.

Every model validates on construction. ``load_config`` / ``load_solver_config``
merge a JSON file and ``--set key=value`` overrides on top of a named preset and
turn pydantic validation failures into ``ConfigError``.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

SEED_ENV_VAR = "AROMA_LAB_SEED"


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


# ============================================================
# Data generation
# ============================================================


class SolverConfig(BaseModel):
    """Fields shared by both pseudo-spectral solvers."""

    n_time: int = Field(description="Number of saved timestamps", ge=2)
    dt_save: float = Field(description="Time between saved frames", gt=0)
    viscosity: float = Field(description="Diffusivity nu", gt=0)
    inner_steps: int = Field(
        default=8, description="Solver sub-steps between two saved frames", ge=1
    )
    seed: int = Field(default=0, description="Base RNG seed; trajectory i uses (seed, i)")
    n_train: int = Field(default=256, description="Training trajectories", ge=0)
    n_test: int = Field(default=64, description="Test trajectories", ge=0)
    keep_fraction: float = Field(
        default=1.0, description="Fraction pi of the regular grid kept per trajectory"
    )
    grid_seed: int = Field(default=1234, description="Seed for per-trajectory grids")
    workers: int = Field(default=1, description="Parallel generation processes", ge=1)

    @field_validator("keep_fraction")
    @classmethod
    def _check_fraction(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        return value


class BurgersConfig(SolverConfig):
    """1D forced viscous Burgers on a periodic domain of length L."""

    equation: Literal["burgers"] = "burgers"
    domain_length: float = Field(default=16.0, description="Domain length L", gt=0)
    n_space: int = Field(default=100, description="Saved spatial resolution", ge=16)
    solver_resolution: int = Field(
        default=256, description="Internal FFT resolution (power of two)"
    )
    n_time: int = Field(default=250, description="Number of saved timestamps", ge=2)
    dt_save: float = Field(default=0.016, description="Time between saved frames", gt=0)
    viscosity: float = Field(default=0.1, description="Diffusivity nu", gt=0)
    forcing_terms: int = Field(default=5, description="Sinusoidal forcing modes", ge=0)
    amplitude_range: Tuple[float, float] = (-0.5, 0.5)
    frequency_range: Tuple[float, float] = (-0.4, 0.4)
    phase_range: Tuple[float, float] = (0.0, 6.283185307179586)
    wavenumber_set: List[int] = Field(default_factory=lambda: [1, 2, 3])

    @model_validator(mode="after")
    def _check_resolution(self):
        if not _is_power_of_two(self.solver_resolution) or self.solver_resolution < 16:
            raise ValueError("solver_resolution must be a power of two >= 16")
        if self.solver_resolution < self.n_space:
            raise ValueError("solver_resolution must be >= n_space")
        return self


class Vorticity2DConfig(SolverConfig):
    """2D incompressible Navier-Stokes in vorticity form on the unit torus."""

    equation: Literal["ns2d"] = "ns2d"
    n_space: int = Field(default=64, description="Grid points per axis")
    n_time: int = Field(default=40, description="Number of saved timestamps", ge=2)
    dt_save: float = Field(default=1.0, description="Time between saved frames", gt=0)
    viscosity: float = Field(default=1e-3, description="Diffusivity nu", gt=0)
    inner_steps: int = Field(default=100, ge=1)
    n_train: int = Field(default=64, ge=0)
    n_test: int = Field(default=8, ge=0)
    forcing_amplitude: float = Field(
        default=0.1, description="Amplitude of the fixed forcing term"
    )
    warmup_frames: int = Field(
        default=0, description="Frames simulated and discarded before saving", ge=0
    )
    ic_alpha: float = Field(default=2.5, description="GRF spectral decay exponent")
    ic_tau: float = Field(default=7.0, description="GRF inverse length scale")
    ic_sigma: float = Field(default=7.0**1.5, description="GRF amplitude")

    @field_validator("n_space")
    @classmethod
    def _check_n_space(cls, value: int) -> int:
        if not _is_power_of_two(value) or value < 16:
            raise ValueError("n_space must be a power of two >= 16")
        return value


# ============================================================
# Architecture
# ============================================================


class EncoderDecoderConfig(BaseModel):
    """Encoder-decoder hyperparameters (one column of the hyperparameter table)."""

    input_dim: int = Field(default=1, description="Spatial dimension of coordinates")
    output_dim: int = Field(default=1, description="Field channels C")
    hidden_dim: int = Field(default=128, description="Token width d")
    num_self_attentions: int = Field(default=2, ge=0)
    num_latents: int = Field(default=32, description="Number of latent tokens M", ge=1)
    latent_dim: int = Field(default=8, description="Latent token channels h", ge=1)
    latent_heads: int = 4
    latent_dim_head: int = 32
    cross_heads: int = 4
    cross_dim_head: int = 32
    dim: int = Field(default=128, description="Width of the decoder MLP")
    depth_inr: int = Field(default=3, description="Hidden layers of the decoder MLP", ge=1)
    frequencies: List[int] = Field(default_factory=lambda: [3, 4, 5])
    num_freq_samples: int = Field(default=16, description="Frequencies per band")
    feature_dim: int = Field(default=16, description="Per-band local feature width")
    encode_geo: bool = False
    max_encoding_freq: float = 4.0
    value_bias: bool = Field(
        default=True, description="Bias on the value embedding and value projections"
    )
    mlp_bias: bool = True
    logsigma_clamp: Tuple[float, float] = (-10.0, 10.0)
    periodic_wrap: bool = Field(
        default=False, description="Wrap decoder queries into [0, 1) instead of failing"
    )
    integer_frequencies: bool = Field(
        default=False, description="Use integer cycle counts for decoder bands"
    )

    @field_validator("frequencies")
    @classmethod
    def _check_bands(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one frequency band is required")
        if any(b <= a for a, b in zip(value, value[1:])) or value[0] <= 0:
            raise ValueError("band exponents must be positive and strictly ascending")
        return value

    @model_validator(mode="after")
    def _check_bottleneck(self):
        if self.latent_dim > self.hidden_dim:
            raise ValueError("latent_dim must not exceed hidden_dim")
        low, high = self.logsigma_clamp
        if low > high:
            raise ValueError("logsigma_clamp must be (low, high) with low <= high")
        return self


class RefinerConfig(BaseModel):
    """Diffusion transformer hyperparameters plus the latent stepper variant."""

    stepper: Literal["diffusion", "deterministic", "mlp"] = "diffusion"
    hidden_size: int = 128
    depth: int = Field(default=4, ge=1)
    num_heads: int = 4
    mlp_ratio: float = 4.0
    min_noise: float = Field(default=1e-2, description="sigma_min of the schedule")
    denoising_steps: int = Field(default=3, description="K", ge=1)
    mlp_hidden: int = Field(default=256, description="Width of the MLP stepper")

    @field_validator("min_noise")
    @classmethod
    def _check_noise(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("min_noise must lie in (0, 1)")
        return value


# ============================================================
# Training
# ============================================================


class TrainConfig(BaseModel):
    """Optimisation settings for one training stage."""

    stage: Literal["autoencoder", "refiner"] = "autoencoder"
    epochs: int = Field(default=500, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    kl_weight: float = Field(default=1e-4, description="beta", ge=0)
    dropout_sequence: float = Field(default=0.1, description="Encoder point dropout")
    regularization: Literal["vae", "l2-ae"] = "vae"
    weight_decay: float = Field(default=1e-4, description="Used in l2-ae mode only")
    seed: int = 0
    validation_fraction: float = 0.1
    checkpoint_every: int = Field(default=50, ge=1)
    window: Optional[int] = Field(
        default=None, description="Sub-trajectory window; None keeps full trajectories"
    )
    horizon: Optional[int] = Field(
        default=None, description="Training horizon in frames (In-t); None = all"
    )
    device: str = "cpu"

    @model_validator(mode="after")
    def _check_lr(self):
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("require lr_max > lr_min > 0")
        if not 0.0 <= self.dropout_sequence < 1.0:
            raise ValueError("dropout_sequence must lie in [0, 1)")
        return self


class ExperimentConfig(BaseModel):
    """Everything the two training commands need."""

    preset: str = "burgers"
    model: EncoderDecoderConfig = Field(default_factory=EncoderDecoderConfig)
    refiner: RefinerConfig = Field(default_factory=RefinerConfig)
    train_autoencoder: TrainConfig = Field(default_factory=TrainConfig)
    train_refiner: TrainConfig = Field(
        default_factory=lambda: TrainConfig(stage="refiner", batch_size=32)
    )


PRESETS: Dict[str, Dict[str, Any]] = {
    "burgers": {
        "model": {
            "input_dim": 1,
            "num_latents": 32,
            "latent_dim": 8,
            "frequencies": [3, 4, 5],
            "encode_geo": False,
            "max_encoding_freq": 4,
        },
        "refiner": {"min_noise": 1e-2},
        "train_autoencoder": {"kl_weight": 1e-4, "window": 50},
        "train_refiner": {"window": 50},
    },
    "ns1e-3": {
        "model": {
            "input_dim": 2,
            "num_latents": 32,
            "latent_dim": 16,
            "frequencies": [2, 3],
            "encode_geo": True,
            "max_encoding_freq": 4,
        },
        "refiner": {"min_noise": 1e-2},
        "train_autoencoder": {"kl_weight": 1e-4, "horizon": 20},
        "train_refiner": {"horizon": 20},
    },
}

FULL_SCALE_EPOCHS = {"train_autoencoder": 5000, "train_refiner": 2000}


# ============================================================
# Loading helpers
# ============================================================


def parse_overrides(items: List[str] | None) -> Dict[str, Any]:
    """Turn ``["a.b=1", "c=[2,3]"]`` into a nested dict, JSON-decoding values."""
    nested: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: {item!r}", item=item)
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_json(path: str | Path | None) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {e}", path=str(path)) from e


def load_config(
    path: str | Path | None = None,
    overrides: List[str] | None = None,
    full_scale: bool = False,
) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from preset + JSON file + overrides."""
    raw = deep_merge(_read_json(path), parse_overrides(overrides))
    preset = raw.get("preset", "burgers")
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}", choices=sorted(PRESETS))
    merged = deep_merge({"preset": preset, **PRESETS[preset]}, raw)
    merged.setdefault("train_refiner", {}).setdefault("stage", "refiner")
    merged["train_refiner"].setdefault("batch_size", 32)
    if full_scale:
        for section, epochs in FULL_SCALE_EPOCHS.items():
            merged.setdefault(section, {})["epochs"] = epochs
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}", path=str(path)) from e


def load_solver_config(
    equation: str, path: str | Path | None = None, overrides: List[str] | None = None
) -> BurgersConfig | Vorticity2DConfig:
    """Flat JSON of solver fields for ``generate-data``."""
    raw = deep_merge(_read_json(path), parse_overrides(overrides))
    model = {"burgers": BurgersConfig, "ns2d": Vorticity2DConfig}.get(equation)
    if model is None:
        raise ConfigError(f"Unknown equation {equation!r}", choices=["burgers", "ns2d"])
    raw.pop("equation", None)
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid solver configuration: {e}", path=str(path)) from e


def resolve_seed(explicit: int | None, default: int = 0) -> int:
    """Explicit seed, else ``AROMA_LAB_SEED``, else ``default``."""
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return default
    try:
        return int(env)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from e
