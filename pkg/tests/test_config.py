"""
Tests for configuration models, presets and override loading.
"""

import json

import pytest

from src.config import (
    SEED_ENV_VAR,
    BurgersConfig,
    EncoderDecoderConfig,
    RefinerConfig,
    TrainConfig,
    Vorticity2DConfig,
    deep_merge,
    load_config,
    load_solver_config,
    parse_overrides,
    resolve_seed,
)
from src.errors import ConfigError


class TestPresets:
    """Test that presets reproduce the published hyperparameter columns."""

    def test_burgers_preset(self):
        """Burgers uses 32 tokens of 8 channels, bands [3,4,5] and no geometry pass."""
        config = load_config()
        assert config.preset == "burgers"
        assert config.model.num_latents == 32
        assert config.model.latent_dim == 8
        assert config.model.frequencies == [3, 4, 5]
        assert config.model.encode_geo is False
        assert config.train_autoencoder.kl_weight == 1e-4
        assert config.train_autoencoder.window == 50

    def test_ns_preset(self):
        """The NS1e-3 preset is 2D with geometry encoding and bands [2,3]."""
        config = load_config(overrides=["preset=ns1e-3"])
        assert config.model.input_dim == 2
        assert config.model.latent_dim == 16
        assert config.model.frequencies == [2, 3]
        assert config.model.encode_geo is True
        assert config.train_refiner.horizon == 20

    def test_refiner_defaults(self):
        """Diffusion transformer defaults: hidden 128, depth 4, 4 heads, K=3."""
        refiner = load_config().refiner
        assert (refiner.hidden_size, refiner.depth, refiner.num_heads) == (128, 4, 4)
        assert refiner.mlp_ratio == 4.0
        assert refiner.denoising_steps == 3
        assert refiner.min_noise == 1e-2

    def test_stage_batch_sizes(self):
        """Default batch sizes are 64 for stage 1 and 32 pairs for stage 2."""
        config = load_config()
        assert config.train_autoencoder.batch_size == 64
        assert config.train_refiner.batch_size == 32
        assert config.train_refiner.stage == "refiner"

    def test_full_scale_epochs(self):
        """--full-scale restores 5000 / 2000 epochs."""
        config = load_config(full_scale=True)
        assert config.train_autoencoder.epochs == 5000
        assert config.train_refiner.epochs == 2000

    def test_unknown_preset(self):
        """Unknown presets are a ConfigError."""
        with pytest.raises(ConfigError, match="Unknown preset"):
            load_config(overrides=["preset=kuramoto"])


class TestOverrides:
    """Test the --set key=value syntax and JSON files."""

    def test_nested_override(self):
        """Dotted keys become nested dicts and values are JSON-decoded."""
        parsed = parse_overrides(["model.num_latents=64", "model.frequencies=[1,2]", "a=text"])
        assert parsed == {"model": {"num_latents": 64, "frequencies": [1, 2]}, "a": "text"}

    def test_override_without_equals(self):
        """An override without '=' is rejected."""
        with pytest.raises(ConfigError):
            parse_overrides(["model.num_latents"])

    def test_override_applied(self):
        """Overrides win over the preset."""
        config = load_config(overrides=["model.num_latents=64", "refiner.stepper=mlp"])
        assert config.model.num_latents == 64
        assert config.refiner.stepper == "mlp"

    def test_null_override(self):
        """JSON null clears an optional field."""
        config = load_config(overrides=["train_autoencoder.window=null"])
        assert config.train_autoencoder.window is None

    def test_file_then_override(self, tmp_path):
        """JSON file values apply first, --set values on top."""
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"model": {"num_latents": 16, "latent_dim": 4}}))
        config = load_config(path, ["model.latent_dim=2"])
        assert config.model.num_latents == 16
        assert config.model.latent_dim == 2

    def test_missing_file(self, tmp_path):
        """A missing config file is a ConfigError, not an OSError."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        """Malformed JSON is a ConfigError."""
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_invalid_value(self):
        """Validation failures surface as ConfigError."""
        with pytest.raises(ConfigError, match="Invalid configuration"):
            load_config(overrides=["train_autoencoder.lr_min=1.0"])

    def test_deep_merge_does_not_mutate(self):
        """deep_merge returns a new dict and keeps the base intact."""
        base = {"a": {"b": 1, "c": 2}}
        merged = deep_merge(base, {"a": {"b": 5}})
        assert merged == {"a": {"b": 5, "c": 2}}
        assert base == {"a": {"b": 1, "c": 2}}


class TestValidation:
    """Test model-level invariants."""

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"solver_resolution": 100},
            {"solver_resolution": 64, "n_space": 100},
            {"viscosity": 0.0},
            {"dt_save": -1.0},
            {"keep_fraction": 0.0},
            {"keep_fraction": 1.5},
        ],
        ids=["not_power_of_two", "coarser_than_output", "zero_viscosity", "negative_dt",
             "zero_fraction", "fraction_above_one"],
    )
    def test_invalid_burgers(self, kwargs):
        """Invalid Burgers configurations fail validation."""
        with pytest.raises(ValueError):
            BurgersConfig(**kwargs)

    def test_vorticity_power_of_two(self):
        """The 2D grid must be a power of two."""
        with pytest.raises(ValueError):
            Vorticity2DConfig(n_space=48)
        assert Vorticity2DConfig(n_space=64).n_space == 64

    def test_bands_ascending(self):
        """Band exponents must be positive and strictly ascending."""
        with pytest.raises(ValueError):
            EncoderDecoderConfig(frequencies=[3, 3])
        with pytest.raises(ValueError):
            EncoderDecoderConfig(frequencies=[])

    def test_bottleneck_narrower_than_width(self):
        """latent_dim may not exceed hidden_dim."""
        with pytest.raises(ValueError):
            EncoderDecoderConfig(hidden_dim=8, latent_dim=16)

    def test_min_noise_range(self):
        """sigma_min lies strictly inside (0, 1)."""
        with pytest.raises(ValueError):
            RefinerConfig(min_noise=1.0)

    def test_learning_rates(self):
        """lr_max > lr_min > 0 and dropout in [0, 1)."""
        with pytest.raises(ValueError):
            TrainConfig(lr_max=1e-5, lr_min=1e-3)
        with pytest.raises(ValueError):
            TrainConfig(dropout_sequence=1.0)


class TestSolverConfig:
    """Test load_solver_config for generate-data."""

    def test_burgers_defaults(self):
        """Burgers defaults: L=16, nu=0.1, (250, 100) frames."""
        config = load_solver_config("burgers")
        assert isinstance(config, BurgersConfig)
        assert (config.n_time, config.n_space) == (250, 100)
        assert config.domain_length == 16.0
        assert config.viscosity == 0.1
        assert config.forcing_terms == 5

    def test_ns_overrides(self):
        """Overrides apply to the flat solver config."""
        config = load_solver_config("ns2d", overrides=["n_space=32", "keep_fraction=0.25"])
        assert isinstance(config, Vorticity2DConfig)
        assert config.n_space == 32
        assert config.keep_fraction == 0.25

    def test_unknown_equation(self):
        """Only burgers and ns2d are known."""
        with pytest.raises(ConfigError, match="Unknown equation"):
            load_solver_config("shallow-water")


class TestSeed:
    """Test the seed fallback chain."""

    def test_explicit_wins(self, monkeypatch):
        """An explicit seed beats the environment."""
        monkeypatch.setenv(SEED_ENV_VAR, "7")
        assert resolve_seed(3, 0) == 3

    def test_environment_fallback(self, monkeypatch):
        """Without an explicit seed the environment variable is used."""
        monkeypatch.setenv(SEED_ENV_VAR, "7")
        assert resolve_seed(None, 0) == 7

    def test_default(self, monkeypatch):
        """Without either, the default is returned."""
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        assert resolve_seed(None, 11) == 11

    def test_bad_environment(self, monkeypatch):
        """A non-integer environment seed is a ConfigError."""
        monkeypatch.setenv(SEED_ENV_VAR, "seven")
        with pytest.raises(ConfigError):
            resolve_seed(None)
