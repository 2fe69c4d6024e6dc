"""
Attention building blocks shared by the encoder, decoder and refiner.

``AttentionCounter`` records the size of every attention score matrix computed
while it is active, which is how the linear-in-N cost of encoding is checked.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np
import torch
from einops import rearrange
from torch import nn

# ============================================================
# Instrumentation
# ============================================================


@dataclass
class AttentionRecord:
    tag: str
    batch: int
    heads: int
    q_len: int
    k_len: int

    @property
    def elements(self) -> int:
        """Score-matrix entries for one item and one head."""
        return self.q_len * self.k_len


@dataclass
class AttentionCounter:
    records: List[AttentionRecord] = field(default_factory=list)

    def total(self, prefix: str = "") -> int:
        return sum(r.elements for r in self.records if r.tag.startswith(prefix))

    def by_tag(self) -> dict:
        totals: dict = {}
        for r in self.records:
            totals[r.tag] = totals.get(r.tag, 0) + r.elements
        return totals


_ACTIVE_COUNTERS: List[AttentionCounter] = []


@contextmanager
def count_attention() -> Iterator[AttentionCounter]:
    """Collect an ``AttentionRecord`` for each attention call inside the block."""
    counter = AttentionCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _record(tag: str, batch: int, heads: int, q_len: int, k_len: int) -> None:
    for counter in _ACTIVE_COUNTERS:
        counter.records.append(AttentionRecord(tag, batch, heads, q_len, k_len))


# ============================================================
# Fourier features
# ============================================================


class FourierFeatures(nn.Module):
    """Interleaved (cos, sin) features at angular frequencies pi * 2^s.

    ``s`` takes ``num_samples`` evenly spaced values in [low, high], so the
    frequencies are log-spaced in [pi 2^low, pi 2^high]. With ``integer=True``
    every frequency is snapped to 2 pi n for a positive integer n, which makes
    the features exactly periodic on [0, 1).
    """

    def __init__(
        self,
        input_dim: int,
        low: float,
        high: float,
        num_samples: int = 16,
        integer: bool = False,
    ):
        super().__init__()
        exponents = np.linspace(low, high, num_samples)
        if integer:
            cycles = np.maximum(1.0, np.round(2.0**exponents / 2.0))
            frequencies = 2.0 * math.pi * cycles
        else:
            frequencies = math.pi * 2.0**exponents
        self.register_buffer(
            "frequencies", torch.tensor(frequencies, dtype=torch.float64), persistent=False
        )
        self.input_dim = input_dim
        self.out_dim = 2 * num_samples * input_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        angles = x[..., None] * self.frequencies.to(x.dtype)  # [..., dim, F]
        features = torch.stack((angles.cos(), angles.sin()), dim=-1)
        return features.reshape(*x.shape[:-1], self.out_dim)


# ============================================================
# Attention
# ============================================================


class CrossAttention(nn.Module):
    """Multi-head attention with separate key and value inputs."""

    def __init__(
        self,
        query_dim: int,
        context_dim: Optional[int] = None,
        heads: int = 4,
        dim_head: int = 32,
        out_dim: Optional[int] = None,
        value_dim: Optional[int] = None,
        value_bias: bool = True,
        tag: str = "attention",
    ):
        super().__init__()
        context_dim = context_dim or query_dim
        value_dim = value_dim or context_dim
        inner = heads * dim_head
        self.heads = heads
        self.scale = dim_head**-0.5
        self.tag = tag
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(value_dim, inner, bias=value_bias)
        self.to_out = nn.Linear(inner, out_dim or query_dim, bias=value_bias)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        value: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ):
        context = x if context is None else context
        value = context if value is None else value

        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(value), "b n (h d) -> b h n d", h=self.heads)

        scores = torch.einsum("bhid,bhjd->bhij", q, k) * self.scale
        weights = scores.softmax(dim=-1)
        _record(self.tag, x.shape[0], self.heads, q.shape[2], k.shape[2])

        out = torch.einsum("bhij,bhjd->bhid", weights, v)
        out = self.to_out(rearrange(out, "b h n d -> b n (h d)"))
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: float = 1.0, out_dim: Optional[int] = None):
        super().__init__()
        hidden = int(dim * mult)
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim or dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention followed by a residual feed-forward."""

    def __init__(self, dim: int, heads: int, dim_head: int, tag: str = "self"):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads=heads, dim_head=dim_head, tag=tag)
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        x = x + self.attn(h)
        return x + self.ff(x)

    def zero_init(self) -> None:
        """Make the block the identity map."""
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.ff.net[-1].weight)
        if self.attn.to_out.bias is not None:
            nn.init.zeros_(self.attn.to_out.bias)
        nn.init.zeros_(self.ff.net[-1].bias)
