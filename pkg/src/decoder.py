"""
Local neural-field decoder: latent tokens -> values at arbitrary coordinates.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
from torch import nn

from .attention import CrossAttention, FourierFeatures, SelfAttentionBlock
from .config import EncoderDecoderConfig
from .errors import DomainError


@dataclass(frozen=True)
class BandSpec:
    """Exponent range [low, high] of one query frequency band."""

    low: float
    high: float
    num_samples: int = 16

    @classmethod
    def from_exponents(cls, exponents: List[int], num_samples: int = 16) -> List["BandSpec"]:
        edges = [0] + list(exponents)
        return [cls(float(lo), float(hi), num_samples) for lo, hi in zip(edges, edges[1:])]


@dataclass
class LocalFeature:
    features: torch.Tensor  # [B, Q, n_bands * feature_dim], ascending band order
    weights: Optional[List[torch.Tensor]] = None  # per band [B, heads, Q, M]


class Decoder(nn.Module):
    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim

        self.lift = nn.Linear(config.latent_dim, d)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(
                d, config.latent_heads, config.latent_dim_head, tag="decoder.self"
            )
            for _ in range(config.num_self_attentions)
        )
        self.context_norm = nn.LayerNorm(d)

        self.bands = BandSpec.from_exponents(config.frequencies, config.num_freq_samples)
        self.embedders = nn.ModuleList(
            FourierFeatures(
                config.input_dim,
                band.low,
                band.high,
                band.num_samples,
                integer=config.integer_frequencies,
            )
            for band in self.bands
        )
        self.band_attn = nn.ModuleList(
            CrossAttention(
                embedder.out_dim,
                context_dim=d,
                heads=config.cross_heads,
                dim_head=config.cross_dim_head,
                out_dim=config.feature_dim,
                value_bias=config.value_bias,
                tag=f"decoder.band{i}",
            )
            for i, embedder in enumerate(self.embedders)
        )

        layers: List[nn.Module] = []
        width = config.feature_dim * len(self.bands)
        for _ in range(config.depth_inr):
            layers += [nn.Linear(width, config.dim, bias=config.mlp_bias), nn.GELU()]
            width = config.dim
        layers.append(nn.Linear(width, config.output_dim, bias=config.mlp_bias))
        self.mlp = nn.Sequential(*layers)

    @property
    def feature_width(self) -> int:
        return self.config.feature_dim * len(self.bands)

    def lift_and_selfattend(self, z: torch.Tensor) -> torch.Tensor:
        tokens = self.lift(z)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def _prepare_queries(self, coords: torch.Tensor) -> torch.Tensor:
        if self.config.periodic_wrap:
            return torch.remainder(coords, 1.0)
        if not torch.isfinite(coords).all() or (coords < 0).any() or (coords >= 1).any():
            raise DomainError("Decoder queries must lie in [0, 1)^dim")
        return coords

    def query_features(
        self, tokens: torch.Tensor, coords: torch.Tensor, return_weights: bool = False
    ) -> LocalFeature:
        """Per-band cross-attention from gamma_b(x) to the lifted tokens."""
        coords = self._prepare_queries(coords)
        context = self.context_norm(tokens)
        if coords.shape[0] != context.shape[0]:
            coords = coords.expand(context.shape[0], -1, -1)
        features, weights = [], []
        for embedder, attn in zip(self.embedders, self.band_attn):
            out, w = attn(embedder(coords), context, return_weights=True)
            features.append(out)
            weights.append(w)
        return LocalFeature(
            features=torch.cat(features, dim=-1), weights=weights if return_weights else None
        )

    def decode_values(self, features: LocalFeature | torch.Tensor) -> torch.Tensor:
        if isinstance(features, LocalFeature):
            features = features.features
        return self.mlp(features)

    def forward(self, z: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """Decode [B, M, h] tokens at [B, Q, dim] (or [1, Q, dim]) coordinates."""
        tokens = self.lift_and_selfattend(z)
        return self.decode_values(self.query_features(tokens, coords))

    def decode_with_attention(
        self, z: torch.Tensor, coords: torch.Tensor
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        tokens = self.lift_and_selfattend(z)
        local = self.query_features(tokens, coords, return_weights=True)
        return self.decode_values(local), local.weights
