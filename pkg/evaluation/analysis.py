"""
Interpretability and cost analyses of a trained encoder-decoder.
"""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from src.attention import count_attention
from src.autoencoder import AutoEncoder, as_tensor
from src.errors import ConfigError

from .rollout import Pipeline, _batched, decode, encode

logger = logging.getLogger(__name__)

STAGES = ("geometry", "prior", "observation", "decoder")
UNINFORMATIVE_LOGSIGMA = 0.1


# ============================================================
# Attention maps
# ============================================================


def _select(weights: torch.Tensor, head: Optional[int]) -> np.ndarray:
    """[1, H, rows, cols] -> [rows, cols], one head or the head average."""
    weights = weights[0]
    weights = weights.mean(dim=0) if head is None else weights[head]
    return weights.detach().cpu().numpy().astype(np.float64)


def attention_maps(
    pipeline: Pipeline,
    coords: np.ndarray,
    values: np.ndarray,
    stage: str,
    tokens: Optional[Sequence[int]] = None,
    head: Optional[int] = None,
    query_coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-point attention weights of the chosen tokens, shape [len(tokens), points].

    Encoder stages return softmax rows of token j over the N observations
    ("prior" uses the raw query tokens before geometry encoding). The decoder
    stage returns the attention mass token j receives from each query point,
    averaged over frequency bands. Decoder maps are exported transposed: each
    query spreads unit mass over the tokens, so their columns sum to 1.
    """
    if stage not in STAGES:
        raise ConfigError(f"Unknown attention stage {stage!r}", choices=list(STAGES))
    encoder = pipeline.autoencoder.encoder
    coords_t = as_tensor(_batched(coords), pipeline.device)
    values_t = as_tensor(pipeline.normalize(_batched(values)), pipeline.device)

    with torch.no_grad():
        gamma, v = encoder.embed(coords_t, values_t)
        if stage == "geometry":
            if not encoder.config.encode_geo:
                raise ConfigError("Model was trained without geometry encoding")
            _, weights = encoder.encode_geometry(gamma, return_weights=True)
            maps = _select(weights, head)
        elif stage == "prior":
            _, weights = encoder.encode_observations(
                encoder.queries(1), gamma, v, return_weights=True
            )
            maps = _select(weights, head)
        elif stage == "observation":
            t_geo = encoder.encode_geometry(gamma)
            _, weights = encoder.encode_observations(t_geo, gamma, v, return_weights=True)
            maps = _select(weights, head)
        else:
            z = encode(pipeline, coords, values)
            query = coords if query_coords is None else query_coords
            _, band_weights = pipeline.autoencoder.decoder.decode_with_attention(
                z, as_tensor(_batched(query), pipeline.device)
            )
            per_band = [_select(w, head) for w in band_weights]  # each [Q, M]
            maps = np.mean(per_band, axis=0).T

    if tokens is not None:
        maps = maps[np.asarray(tokens)]
    return maps


def attention_entropy(maps: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row after normalizing it to sum to one."""
    maps = np.asarray(maps, dtype=np.float64)
    p = maps / maps.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# ============================================================
# Token perturbation
# ============================================================


@dataclass
class TokenPerturbation:
    token: int
    base: np.ndarray  # [Q, C] decode of Z^0
    delta: np.ndarray  # [T - 1, Q, C], |decode(Z^0 with slot j <- z^t_j) - base|
    attention_mass: np.ndarray  # [Q]
    locality: float


def locality_statistic(
    delta: np.ndarray, attention_mass: np.ndarray, top_fraction: float = 0.2
) -> float:
    """Share of sum(delta^2) carried by the top ``top_fraction`` points by attention mass.

    The top set is a count of points, round(top_fraction * Q) (at least one),
    taken in decreasing order of attention mass. It is not the set of points
    holding ``top_fraction`` of the total mass.

    ``delta`` is [Q] or [..., Q, C]; ``attention_mass`` is [Q].
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 1:
        energy = delta**2
    else:
        energy = np.moveaxis(delta**2, -2, 0).reshape(delta.shape[-2], -1).sum(axis=1)
    total = energy.sum()
    if total == 0:
        return float("nan")
    n_top = max(1, int(round(top_fraction * len(energy))))
    top = np.argsort(-np.asarray(attention_mass), kind="stable")[:n_top]
    return float(energy[top].sum() / total)


def token_perturbation(
    pipeline: Pipeline,
    coords: np.ndarray,
    trajectory: np.ndarray,
    token: int,
    query_coords: Optional[np.ndarray] = None,
    top_fraction: float = 0.2,
) -> TokenPerturbation:
    """Replace slot j of Z^0 by z^t_j for t = 1..T-1 and decode."""
    query = coords if query_coords is None else query_coords
    trajectory = np.asarray(trajectory)
    z = encode(pipeline, np.broadcast_to(coords, (len(trajectory), *coords.shape)), trajectory)
    base_z = z[:1]
    base = decode(pipeline, base_z, query)[0]

    perturbed = base_z.repeat(len(trajectory) - 1, 1, 1)
    perturbed[:, token] = z[1:, token]
    delta = np.abs(decode(pipeline, perturbed, query) - base[None])

    mass = attention_maps(
        pipeline, coords, trajectory[0], "decoder", tokens=[token], query_coords=query
    )[0]
    return TokenPerturbation(
        token=token,
        base=base,
        delta=delta,
        attention_mass=mass,
        locality=locality_statistic(delta, mass, top_fraction),
    )


# ============================================================
# Latent dumps
# ============================================================


def latent_dump(
    pipeline: Pipeline,
    coords: np.ndarray,
    trajectory: np.ndarray,
    predicted: Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """Long table of mu, logsigma (and predicted Z) per (t, token, channel).

    Channels whose mean log-scale stays near zero carry the prior and are
    flagged ``uninformative``.
    """
    trajectory = np.asarray(trajectory)
    n_time = len(trajectory)
    encoder = pipeline.autoencoder.encoder
    coords_t = as_tensor(np.broadcast_to(coords, (n_time, *coords.shape)), pipeline.device)
    values_t = as_tensor(pipeline.normalize(trajectory), pipeline.device)
    with torch.no_grad():
        latents = encoder(coords_t, values_t, sample=False)
    mu = latents.mu.cpu().numpy()
    logsigma = latents.logsigma.cpu().numpy()

    t, token, channel = np.meshgrid(
        np.arange(n_time), np.arange(mu.shape[1]), np.arange(mu.shape[2]), indexing="ij"
    )
    frame = pd.DataFrame(
        {
            "t": t.ravel(),
            "token": token.ravel(),
            "channel": channel.ravel(),
            "mu": mu.ravel(),
            "logsigma": logsigma.ravel(),
        }
    )
    if predicted is not None:
        predicted = np.asarray(predicted)[:n_time]
        pred_col = np.full(mu.shape, np.nan)
        pred_col[: len(predicted)] = predicted
        frame["predicted"] = pred_col.ravel()

    mean_logsigma = frame.groupby(["token", "channel"])["logsigma"].transform("mean")
    frame["uninformative"] = mean_logsigma.abs() < UNINFORMATIVE_LOGSIGMA
    return frame


# ============================================================
# Cost
# ============================================================


def complexity_estimate(
    n_points: int,
    n_latents: int,
    n_steps: int,
    denoising_steps: int,
    encoder_layers: int,
    refiner_layers: int,
    width: int,
) -> float:
    """Analytic attention cost (2N + 4 K T L2 M + L1 M) M d of one forecast."""
    m = n_latents
    return float(
        (2 * n_points + 4 * denoising_steps * n_steps * refiner_layers * m + encoder_layers * m)
        * m
        * width
    )


def encode_cost(
    autoencoder: AutoEncoder,
    sizes: Sequence[int],
    n_queries: Optional[int] = None,
    repeats: int = 3,
    seed: int = 0,
) -> pd.DataFrame:
    """Counted attention elements and wall-clock of encode (and decode) per N.

    ``scaling_ratio`` compares each size with the previous one: with sizes that
    double it is seconds(2N) / (2 seconds(N)), NaN on the first row.
    """
    config = autoencoder.config
    rng = np.random.default_rng(seed)
    autoencoder.eval()
    rows: List[dict] = []
    for n in sizes:
        coords = torch.as_tensor(rng.random((1, n, config.input_dim)) * 0.999, dtype=torch.float32)
        noise = rng.standard_normal((1, n, config.output_dim))
        values = torch.as_tensor(noise, dtype=torch.float32)
        with torch.no_grad(), count_attention() as counter:
            z = autoencoder.encode(coords, values, sample=False).z
        encoder_elements = counter.total("encoder")

        timings = []
        with torch.no_grad():
            for _ in range(repeats):
                start = time.perf_counter()
                autoencoder.encode(coords, values, sample=False)
                timings.append(time.perf_counter() - start)

        decoder_elements = 0
        if n_queries:
            queries = torch.as_tensor(
                rng.random((1, n_queries, config.input_dim)) * 0.999, dtype=torch.float32
            )
            with torch.no_grad(), count_attention() as counter:
                autoencoder.decode(z, queries)
            decoder_elements = counter.total("decoder.band")

        expected = config.num_latents * n * (2 if config.encode_geo else 1)
        rows.append(
            {
                "n_points": n,
                "encoder_elements": encoder_elements,
                "expected_encoder_elements": expected,
                "decoder_elements": decoder_elements,
                "seconds": float(np.median(timings)),
            }
        )
    frame = pd.DataFrame(rows)
    # seconds(rN) / (r seconds(N)) between consecutive sizes; 1 means linear
    growth = frame["n_points"] / frame["n_points"].shift(1)
    frame["scaling_ratio"] = frame["seconds"] / (growth * frame["seconds"].shift(1))
    return frame
