"""
Tests for the noise schedule, the v-prediction algebra, the diffusion
transformer and the three latent steppers.
"""

import numpy as np
import pytest
import torch
from torch.func import functional_call

from src.errors import ConfigError, InvalidSchedule, RefinerNumericalError
from src.refiner import (
    AdaLNBlock,
    DiffusionTransformer,
    LatentRefiner,
    build_schedule,
    predict_clean,
    predict_noise,
    sample_next,
    vpredict_target,
)

from .conftest import tiny_refiner_config


def make_refiner(stepper: str = "diffusion", seed: int = 0, **overrides) -> LatentRefiner:
    torch.manual_seed(seed)
    config = tiny_refiner_config(stepper=stepper, **overrides)
    return LatentRefiner(latent_dim=2, num_latents=4, config=config).to(torch.float64)


def random_latents(batch: int = 3, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 4, 2, generator=generator, dtype=torch.float64)


def perturb_weights(module: torch.nn.Module, seed: int = 1) -> None:
    """Give zero-initialized layers non-trivial values."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.add_(0.1 * torch.randn(param.shape, generator=generator, dtype=param.dtype))


# ============================================================
# Schedule
# ============================================================


class TestSchedule:
    """Test alpha_bar_k = 1 - sigma_min^(2(K-k)/K)."""

    def test_endpoints(self):
        """k = 0 keeps 1 - sigma_min^2 of the signal and k = K is pure noise."""
        schedule = build_schedule(3, 1e-2)
        assert schedule.alpha_bar[0] == pytest.approx(1.0 - 1e-4)
        assert schedule.alpha_bar[-1] == 0.0
        assert len(schedule.alpha_bar) == 4

    def test_monotone(self):
        """Signal decreases strictly with the noise level."""
        schedule = build_schedule(8, 1e-2)
        assert np.all(np.diff(schedule.alpha_bar) < 0)

    def test_intermediate_level(self):
        """K = 2: alpha_bar_1 = 1 - sigma_min."""
        assert build_schedule(2, 0.1).alpha_bar[1] == pytest.approx(0.9)

    @pytest.mark.parametrize(
        "steps,min_noise", [(0, 1e-2), (3, 0.0), (3, 1.0)], ids=["no_steps", "zero", "one"]
    )
    def test_invalid(self, steps, min_noise):
        """Invalid step counts and noise floors raise InvalidSchedule."""
        with pytest.raises(InvalidSchedule):
            build_schedule(steps, min_noise)

    def test_round_trip_dict(self):
        """The schedule is rebuilt from its serialized parameters."""
        from src.refiner import NoiseSchedule

        schedule = build_schedule(5, 0.05)
        restored = NoiseSchedule.from_dict(schedule.to_dict())
        np.testing.assert_array_equal(restored.alpha_bar, schedule.alpha_bar)


class TestVelocityAlgebra:
    """Test the conversions between (z_k, v) and (z_0, eps)."""

    @pytest.mark.parametrize("k", [1, 2, 3], ids=["k1", "k2", "k3"])
    def test_recovers_clean_and_noise(self, k):
        """predict_clean and predict_noise invert vpredict_target."""
        schedule = build_schedule(3, 1e-2)
        z0, eps = random_latents(seed=1), random_latents(seed=2)
        z_k, v = vpredict_target(z0, eps, k, schedule)
        torch.testing.assert_close(predict_clean(z_k, v, k, schedule), z0)
        torch.testing.assert_close(predict_noise(z_k, v, k, schedule), eps)

    def test_pure_noise_level(self):
        """At k = K, z_K = eps and v = -z_0."""
        schedule = build_schedule(3, 1e-2)
        z0, eps = random_latents(seed=1), random_latents(seed=2)
        z_k, v = vpredict_target(z0, eps, 3, schedule)
        torch.testing.assert_close(z_k, eps)
        torch.testing.assert_close(v, -z0)

    def test_per_item_levels(self):
        """A vector of levels applies one level per batch item."""
        schedule = build_schedule(3, 1e-2)
        z0, eps = random_latents(seed=1), random_latents(seed=2)
        k = torch.tensor([1, 2, 3])
        z_k, _ = vpredict_target(z0, eps, k, schedule)
        for i in range(3):
            single, _ = vpredict_target(z0[i : i + 1], eps[i : i + 1], int(k[i]), schedule)
            torch.testing.assert_close(z_k[i : i + 1], single)


# ============================================================
# Sampling
# ============================================================


def oracle_denoiser(z0: torch.Tensor, schedule):
    """Returns the exact velocity that points every z_k back to z0."""

    def denoise(z_cond, z_k, k):
        a, s = schedule.coefficients(k, z_k)
        eps = (z_k - a * z0) / s
        return a * eps - s * z0

    return denoise


class TestSampling:
    """Test the deterministic reverse process."""

    @pytest.mark.parametrize("steps", [1, 3, 10], ids=["k1", "k3", "k10"])
    def test_oracle_recovers_target(self, steps):
        """With the exact velocity every step lands on z_0."""
        schedule = build_schedule(steps, 1e-2)
        z0 = random_latents(seed=4)
        refiner = make_refiner(denoising_steps=steps)
        out = sample_next(
            refiner.net,
            random_latents(),
            schedule,
            generator=torch.Generator().manual_seed(0),
            denoiser=oracle_denoiser(z0, schedule),
        )
        torch.testing.assert_close(out, z0)

    def test_reproducible(self):
        """A fixed generator gives the same sample."""
        refiner = make_refiner().eval()
        perturb_weights(refiner)
        z = random_latents()
        a = refiner.step(z, generator=torch.Generator().manual_seed(5))
        b = refiner.step(z, generator=torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_seed_changes_sample(self):
        """Different generator seeds give different samples."""
        refiner = make_refiner().eval()
        perturb_weights(refiner)
        z = random_latents()
        a = refiner.step(z, generator=torch.Generator().manual_seed(5))
        b = refiner.step(z, generator=torch.Generator().manual_seed(6))
        assert not torch.allclose(a, b)

    def test_schedule_mismatch(self):
        """A schedule with a different K than the configuration is rejected."""
        refiner = make_refiner()
        with pytest.raises(ConfigError):
            refiner.step(random_latents(), schedule=build_schedule(5, 1e-2))


# ============================================================
# Transformer
# ============================================================


class TestDiffusionTransformer:
    """Test the adaLN-Zero transformer."""

    def test_zero_output_at_init(self):
        """The zero-initialized head predicts v = 0."""
        torch.manual_seed(0)
        model = DiffusionTransformer(2, 4, tiny_refiner_config()).to(torch.float64)
        out = model(random_latents(), random_latents(seed=1), 2)
        assert out.shape == (3, 4, 2)
        assert torch.all(out == 0)

    def test_adaln_block_identity_at_init(self):
        """Zero modulation gates make a fresh block the identity."""
        torch.manual_seed(0)
        block = AdaLNBlock(16, 2, 2.0).to(torch.float64)
        x = torch.randn(2, 8, 16, dtype=torch.float64)
        c = torch.randn(2, 16, dtype=torch.float64)
        torch.testing.assert_close(block(x, c), x)

    def test_level_conditions_output(self):
        """Once trained away from zero, the output depends on k."""
        torch.manual_seed(0)
        model = DiffusionTransformer(2, 4, tiny_refiner_config()).to(torch.float64)
        perturb_weights(model)
        z_cond, z_noisy = random_latents(), random_latents(seed=1)
        assert not torch.allclose(model(z_cond, z_noisy, 1), model(z_cond, z_noisy, 3))

    def test_non_finite(self):
        """Non-finite activations raise RefinerNumericalError."""
        torch.manual_seed(0)
        model = DiffusionTransformer(2, 4, tiny_refiner_config()).to(torch.float64)
        perturb_weights(model)
        z = random_latents()
        z[0, 0, 0] = float("nan")
        with pytest.raises(RefinerNumericalError):
            model(z, random_latents(seed=1), 1)

    def test_conditioning_order_matters(self):
        """Swapping two conditioning tokens changes the prediction."""
        torch.manual_seed(0)
        model = DiffusionTransformer(2, 4, tiny_refiner_config()).to(torch.float64)
        perturb_weights(model)
        z_cond, z_noisy = random_latents(), random_latents(seed=1)
        swapped = z_cond[:, [1, 0, 2, 3]]
        assert not torch.allclose(model(z_cond, z_noisy, 2), model(swapped, z_noisy, 2))

    def test_gradcheck(self):
        """Weight gradients of a depth-1, width-8 transformer match finite differences."""
        torch.manual_seed(0)
        config = tiny_refiner_config(hidden_size=8, num_heads=2, depth=1)
        model = DiffusionTransformer(2, 4, config).to(torch.float64)
        perturb_weights(model)
        z_cond, z_noisy = random_latents(batch=2), random_latents(batch=2, seed=1)
        names = [name for name, _ in model.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())

        def objective(*flat):
            v = functional_call(model, dict(zip(names, flat)), (z_cond, z_noisy, 2))
            return (v**2).sum()

        assert torch.autograd.gradcheck(objective, params, eps=1e-6, atol=1e-6, rtol=1e-4)


# ============================================================
# Steppers
# ============================================================


class TestSteppers:
    """Test the shared step / loss interface."""

    @pytest.mark.parametrize(
        "stepper", ["diffusion", "deterministic", "mlp"], ids=["diffusion", "det", "mlp"]
    )
    def test_step_shape(self, stepper):
        """Every stepper maps [B, M, h] to [B, M, h]."""
        refiner = make_refiner(stepper).eval()
        out = refiner.step(random_latents(), generator=torch.Generator().manual_seed(0))
        assert out.shape == (3, 4, 2)

    @pytest.mark.parametrize(
        "stepper", ["diffusion", "deterministic", "mlp"], ids=["diffusion", "det", "mlp"]
    )
    def test_loss_has_gradient(self, stepper):
        """The loss is a finite scalar with gradients for some parameter."""
        refiner = make_refiner(stepper).train()
        perturb_weights(refiner)
        loss = refiner.loss(
            random_latents(), random_latents(seed=1), generator=torch.Generator().manual_seed(0)
        )
        loss.backward()
        assert loss.dim() == 0 and torch.isfinite(loss)
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in refiner.parameters())

    def test_diffusion_loss_at_init(self):
        """With v_hat = 0 the loss is the mean squared velocity target."""
        refiner = make_refiner()
        z_t, z_next = random_latents(), random_latents(seed=1)
        loss = refiner.loss(z_t, z_next, generator=torch.Generator().manual_seed(7))

        generator = torch.Generator().manual_seed(7)
        k = torch.randint(1, 4, (3,), generator=generator)
        eps = torch.randn(z_next.shape, generator=generator, dtype=z_next.dtype)
        _, v = vpredict_target(z_next, eps, k, refiner.schedule)
        torch.testing.assert_close(loss, (v**2).mean())

    def test_mlp_is_tokenwise(self):
        """Changing one token leaves every other token's update unchanged."""
        refiner = make_refiner("mlp").eval()
        z = random_latents()
        changed = z.clone()
        changed[:, 2] += 1.0
        a, b = refiner.step(z), refiner.step(changed)
        torch.testing.assert_close(a[:, [0, 1, 3]], b[:, [0, 1, 3]])
        assert not torch.allclose(a[:, 2], b[:, 2])

    def test_deterministic_ignores_generator(self):
        """The deterministic stepper draws no noise."""
        refiner = make_refiner("deterministic").eval()
        perturb_weights(refiner)
        z = random_latents()
        a = refiner.step(z, generator=torch.Generator().manual_seed(1))
        b = refiner.step(z, generator=torch.Generator().manual_seed(2))
        assert torch.equal(a, b)
