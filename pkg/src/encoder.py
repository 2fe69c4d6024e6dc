"""
Point-cloud encoder: N (position, value) observations -> M latent tokens.

Learnable query tokens first attend to the positional embeddings alone
(geometry encoding, optional), then to positions as keys and values as values
(observation encoding). A token-wise bottleneck produces the mean and log-scale
of a diagonal Gaussian over the M x h latent tokens.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from .attention import CrossAttention, FeedForward, FourierFeatures
from .config import EncoderDecoderConfig
from .errors import DomainError, EmptyObservationSet, EncoderNumericalError, InvalidRatio


@dataclass
class LatentTokens:
    z: torch.Tensor  # [B, M, h]
    mu: torch.Tensor
    logsigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return self.logsigma.exp()


def check_coords(coords: torch.Tensor) -> None:
    if not torch.isfinite(coords).all() or (coords < 0).any() or (coords >= 1).any():
        raise DomainError(
            "Coordinates must lie in [0, 1)^dim",
            min=float(coords.min()) if coords.numel() else None,
            max=float(coords.max()) if coords.numel() else None,
        )


def sequence_dropout(
    coords: torch.Tensor,
    values: torch.Tensor,
    ratio: float,
    generator: Optional[torch.Generator] = None,
    training: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Drop floor(ratio * N) points per item, uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatio(f"Dropout ratio must lie in [0, 1), got {ratio}", ratio=ratio)
    n_points = coords.shape[1]
    n_drop = int(ratio * n_points)
    if not training or n_drop == 0:
        return coords, values
    noise = torch.rand(coords.shape[:2], generator=generator).to(coords.device)
    keep = noise.argsort(dim=1)[:, : n_points - n_drop]
    keep, _ = keep.sort(dim=1)
    gather = lambda t: torch.gather(t, 1, keep[..., None].expand(-1, -1, t.shape[-1]))  # noqa: E731
    return gather(coords), gather(values)


class Encoder(nn.Module):
    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim

        self.embedder = FourierFeatures(
            config.input_dim, 0.0, config.max_encoding_freq, config.num_freq_samples
        )
        self.pos_proj = nn.Linear(self.embedder.out_dim, d)
        self.value_embed = nn.Linear(config.output_dim, d, bias=config.value_bias)
        self.query = nn.Parameter(torch.randn(config.num_latents, d) * 0.02)

        if config.encode_geo:
            self.geo_norm = nn.LayerNorm(d)
            self.geo_attn = CrossAttention(
                d,
                heads=config.cross_heads,
                dim_head=config.cross_dim_head,
                value_bias=config.value_bias,
                tag="encoder.geometry",
            )
            self.geo_ff = FeedForward(d)

        self.obs_norm = nn.LayerNorm(d)
        self.obs_attn = CrossAttention(
            d,
            heads=config.cross_heads,
            dim_head=config.cross_dim_head,
            value_bias=config.value_bias,
            tag="encoder.observation",
        )
        self.obs_ff = FeedForward(d)

        self.to_mu = nn.Linear(d, config.latent_dim)
        self.to_logsigma = nn.Linear(d, config.latent_dim)

    def embed(self, coords: torch.Tensor, values: torch.Tensor):
        """Positional embedding gamma(x) and value embedding v(x), both [B, N, d]."""
        check_coords(coords)
        if coords.shape[1] == 0:
            raise EmptyObservationSet("Cannot encode an empty set of observations")
        gamma = self.pos_proj(self.embedder(coords))
        return gamma, self.value_embed(values)

    def queries(self, batch: int) -> torch.Tensor:
        return self.query.unsqueeze(0).expand(batch, -1, -1)

    def encode_geometry(self, gamma: torch.Tensor, return_weights: bool = False):
        tokens = self.queries(gamma.shape[0])
        if not self.config.encode_geo:
            return (tokens, None) if return_weights else tokens
        attended, weights = self.geo_attn(self.geo_norm(tokens), gamma, return_weights=True)
        t_geo = tokens + self.geo_ff(attended)
        return (t_geo, weights) if return_weights else t_geo

    def encode_observations(
        self,
        t_geo: torch.Tensor,
        gamma: torch.Tensor,
        v: torch.Tensor,
        return_weights: bool = False,
    ):
        if gamma.shape[1] == 0:
            raise EmptyObservationSet("Cannot encode an empty set of observations")
        attended, weights = self.obs_attn(
            self.obs_norm(t_geo), gamma, value=v, return_weights=True
        )
        t_obs = t_geo + self.obs_ff(attended)
        return (t_obs, weights) if return_weights else t_obs

    def bottleneck(self, t_obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mu = self.to_mu(t_obs)
        logsigma = self.to_logsigma(t_obs).clamp(*self.config.logsigma_clamp)
        if not (torch.isfinite(mu).all() and torch.isfinite(logsigma).all()):
            raise EncoderNumericalError("Encoder produced non-finite mean or log-scale")
        return mu, logsigma

    def forward(
        self,
        coords: torch.Tensor,
        values: torch.Tensor,
        sample: Optional[bool] = None,
        generator: Optional[torch.Generator] = None,
    ) -> LatentTokens:
        """Encode a batch; samples Z in train mode and returns Z = mu in eval mode."""
        gamma, v = self.embed(coords, values)
        t_geo = self.encode_geometry(gamma)
        t_obs = self.encode_observations(t_geo, gamma, v)
        mu, logsigma = self.bottleneck(t_obs)

        if sample is None:
            sample = self.training
        if sample:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype).to(mu.device)
            z = mu + logsigma.exp() * eps
        else:
            z = mu
        return LatentTokens(z=z, mu=mu, logsigma=logsigma)
