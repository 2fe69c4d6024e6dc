"""
Latent time steppers.

The default stepper is a conditional diffusion transformer trained with the
v-prediction objective: the sequence (Z^t, Z~_k) of 2M tokens runs through
adaLN-Zero blocks conditioned on the noise level k, and the head predicts the
velocity for the target half. Sampling starts from pure noise and applies K
deterministic DDIM updates. Two ablation steppers share the interface: the same
transformer trained directly with MSE, and a token-wise MLP.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import CrossAttention
from .config import RefinerConfig
from .errors import ConfigError, InvalidSchedule, RefinerNumericalError

logger = logging.getLogger(__name__)

# ============================================================
# Noise schedule and v-prediction algebra
# ============================================================


@dataclass
class NoiseSchedule:
    """Signal fractions alpha_bar[k] for k = 0..K; k = K is pure noise."""

    steps: int
    min_noise: float
    alpha_bar: np.ndarray  # [K + 1], float64

    def coefficients(self, k, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(alpha_bar_k), sqrt(1 - alpha_bar_k)) broadcastable against ``like``."""
        k = torch.as_tensor(k, device=like.device).long().reshape(-1)
        table = torch.as_tensor(self.alpha_bar, dtype=like.dtype, device=like.device)
        alpha = table[k].reshape(-1, *([1] * (like.dim() - 1)))
        return alpha.sqrt(), (1.0 - alpha).sqrt()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "min_noise": self.min_noise,
            "alpha_bar": self.alpha_bar.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NoiseSchedule":
        return build_schedule(int(data["steps"]), float(data["min_noise"]))


def build_schedule(steps: int, min_noise: float) -> NoiseSchedule:
    """alpha_bar_k = 1 - min_noise ** (2 (K - k) / K)."""
    if steps < 1:
        raise InvalidSchedule(f"Need at least one denoising step, got {steps}", steps=steps)
    if not 0.0 < min_noise < 1.0:
        raise InvalidSchedule(
            f"min_noise must lie in (0, 1), got {min_noise}", min_noise=min_noise
        )
    k = np.arange(steps + 1, dtype=np.float64)
    alpha_bar = 1.0 - min_noise ** (2.0 * (steps - k) / steps)
    return NoiseSchedule(steps=steps, min_noise=min_noise, alpha_bar=alpha_bar)


def vpredict_target(
    z0: torch.Tensor, eps: torch.Tensor, k, schedule: NoiseSchedule
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Noisy latent z_k and its velocity target v."""
    a, s = schedule.coefficients(k, z0)
    return a * z0 + s * eps, a * eps - s * z0


def predict_clean(z_k: torch.Tensor, v: torch.Tensor, k, schedule: NoiseSchedule) -> torch.Tensor:
    a, s = schedule.coefficients(k, z_k)
    return a * z_k - s * v


def predict_noise(z_k: torch.Tensor, v: torch.Tensor, k, schedule: NoiseSchedule) -> torch.Tensor:
    a, s = schedule.coefficients(k, z_k)
    return s * z_k + a * v


# ============================================================
# Diffusion transformer
# ============================================================


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of the noise level followed by a two-layer MLP."""

    def __init__(self, hidden_size: int, frequency_embedding_size: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
        ).to(device=t.device)
        args = t[:, None].double() * freqs[None]
        embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
        return embedding

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(self.timestep_embedding(t, self.frequency_embedding_size).to(dtype))


class AdaLNBlock(nn.Module):
    """Transformer block with shift, scale and gate signals for both sub-layers.

    Each sub-layer has its own modulation MLP. Both are zero-initialized, so the
    block starts as the identity on the token stream.
    """

    def __init__(self, hidden_size: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.attn = CrossAttention(
            hidden_size, heads=num_heads, dim_head=hidden_size // num_heads, tag="refiner.self"
        )
        self.norm2 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        mlp_hidden = int(hidden_size * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_size, mlp_hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_hidden, hidden_size),
        )
        self.modulation_attn = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 3 * hidden_size))
        self.modulation_mlp = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 3 * hidden_size))
        for modulation in (self.modulation_attn, self.modulation_mlp):
            nn.init.zeros_(modulation[-1].weight)
            nn.init.zeros_(modulation[-1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1 = self.modulation_attn(c).chunk(3, dim=1)
        shift2, scale2, gate2 = self.modulation_mlp(c).chunk(3, dim=1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1))
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, hidden_size: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden_size, out_channels)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 2 * hidden_size))
        for layer in (self.linear, self.modulation[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DiffusionTransformer(nn.Module):
    """Maps (Z^t, Z~_k, k) to the velocity of the target half."""

    def __init__(self, latent_dim: int, num_latents: int, config: RefinerConfig):
        super().__init__()
        hidden = config.hidden_size
        self.num_latents = num_latents
        self.input_proj = nn.Linear(latent_dim, hidden)
        self.pos_embed = nn.Parameter(torch.randn(1, 2 * num_latents, hidden) * 0.02)
        self.t_embedder = TimestepEmbedder(hidden)
        self.blocks = nn.ModuleList(
            AdaLNBlock(hidden, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.final_layer = FinalLayer(hidden, latent_dim)

        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)

    def forward(self, z_cond: torch.Tensor, z_noisy: torch.Tensor, k) -> torch.Tensor:
        batch = z_cond.shape[0]
        k = torch.as_tensor(k, device=z_cond.device).reshape(-1).expand(batch)
        x = self.input_proj(torch.cat([z_cond, z_noisy], dim=1)) + self.pos_embed
        c = self.t_embedder(k)
        for block in self.blocks:
            x = block(x, c)
        out = self.final_layer(x[:, self.num_latents :], c)
        if not torch.isfinite(out).all():
            raise RefinerNumericalError("Refiner produced non-finite activations")
        return out


def refine_step(
    model: DiffusionTransformer, z_cond: torch.Tensor, z_noisy: torch.Tensor, k
) -> torch.Tensor:
    return model(z_cond, z_noisy, k)


@torch.no_grad()
def sample_next(
    model: DiffusionTransformer,
    z_cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    denoiser=None,
) -> torch.Tensor:
    """K deterministic reverse steps from pure noise; returns the clean estimate.

    ``denoiser(z_cond, z_k, k)`` replaces the network when given.
    """
    denoiser = denoiser or model
    z = torch.randn(z_cond.shape, generator=generator, dtype=z_cond.dtype).to(z_cond.device)
    for k in range(schedule.steps, 0, -1):
        v_hat = denoiser(z_cond, z, k)
        z0_hat = predict_clean(z, v_hat, k, schedule)
        if k == 1:
            return z0_hat
        eps_hat = predict_noise(z, v_hat, k, schedule)
        a, s = schedule.coefficients(k - 1, z)
        z = a * z0_hat + s * eps_hat
    return z


# ============================================================
# Steppers
# ============================================================


class MLPStepper(nn.Module):
    """Token-wise MLP; tokens never interact."""

    def __init__(self, latent_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, latent_dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class LatentRefiner(nn.Module):
    """Common interface of the three steppers: ``step`` and ``loss``."""

    def __init__(self, latent_dim: int, num_latents: int, config: RefinerConfig):
        super().__init__()
        self.config = config
        self.kind = config.stepper
        self.schedule = build_schedule(config.denoising_steps, config.min_noise)
        if self.kind == "mlp":
            self.net = MLPStepper(latent_dim, config.mlp_hidden)
        else:
            self.net = DiffusionTransformer(latent_dim, num_latents, config)

    def deterministic_step(self, z_t: torch.Tensor) -> torch.Tensor:
        # Level 0 sentinel; the target half carries a copy of Z^t.
        return self.net(z_t, z_t, 0)

    def mlp_step(self, z_t: torch.Tensor) -> torch.Tensor:
        return self.net(z_t)

    def step(
        self,
        z_t: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        schedule: Optional[NoiseSchedule] = None,
    ) -> torch.Tensor:
        if self.kind == "mlp":
            return self.mlp_step(z_t)
        if self.kind == "deterministic":
            return self.deterministic_step(z_t)
        schedule = schedule or self.schedule
        if schedule.steps != self.config.denoising_steps:
            raise ConfigError(
                "Schedule does not match the refiner configuration",
                schedule_steps=schedule.steps,
                config_steps=self.config.denoising_steps,
            )
        return sample_next(self.net, z_t, schedule, generator)

    def loss(
        self,
        z_t: torch.Tensor,
        z_next: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        if self.kind == "mlp":
            return F.mse_loss(self.mlp_step(z_t), z_next)
        if self.kind == "deterministic":
            return F.mse_loss(self.deterministic_step(z_t), z_next)
        k = torch.randint(
            1, self.schedule.steps + 1, (z_t.shape[0],), generator=generator
        ).to(z_t.device)
        eps = torch.randn(z_next.shape, generator=generator, dtype=z_next.dtype).to(z_t.device)
        z_k, v = vpredict_target(z_next, eps, k, self.schedule)
        return F.mse_loss(refine_step(self.net, z_t, z_k, k), v)
