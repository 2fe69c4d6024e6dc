"""
Encoder + decoder pair trained jointly in the first stage.
"""

from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .config import EncoderDecoderConfig
from .decoder import Decoder
from .encoder import Encoder, LatentTokens, sequence_dropout


def as_tensor(array, device: str | torch.device = "cpu", dtype=torch.float32) -> torch.Tensor:
    if isinstance(array, torch.Tensor):
        return array.to(device=device, dtype=dtype)
    return torch.as_tensor(np.asarray(array), dtype=dtype, device=device)


class AutoEncoder(nn.Module):
    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def encode(
        self,
        coords: torch.Tensor,
        values: torch.Tensor,
        sample: Optional[bool] = None,
        generator: Optional[torch.Generator] = None,
    ) -> LatentTokens:
        return self.encoder(coords, values, sample=sample, generator=generator)

    def decode(self, z: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return self.decoder(z, coords)

    def forward(
        self,
        coords: torch.Tensor,
        values: torch.Tensor,
        dropout: float = 0.0,
        generator: Optional[torch.Generator] = None,
        sample: Optional[bool] = None,
    ) -> Tuple[torch.Tensor, LatentTokens]:
        """Reconstruct ``values`` on ``coords``; the encoder may see a dropped subset."""
        enc_coords, enc_values = sequence_dropout(
            coords, values, dropout, generator=generator, training=self.training
        )
        latents = self.encode(enc_coords, enc_values, sample=sample, generator=generator)
        return self.decode(latents.z, coords), latents
