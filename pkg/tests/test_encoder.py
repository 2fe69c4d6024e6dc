"""
Tests for the point-cloud encoder.

Exactness properties (permutation, duplication, geometry/value separation) are
checked in float64 so that tolerances reflect the math and not rounding.
"""

import math

import pytest
import torch
from torch.func import functional_call

from src.attention import FourierFeatures, count_attention
from src.encoder import Encoder, sequence_dropout
from src.errors import DomainError, EmptyObservationSet, InvalidRatio

from .conftest import tiny_model_config


def make_encoder(dtype=torch.float64, seed: int = 0, **overrides) -> Encoder:
    torch.manual_seed(seed)
    return Encoder(tiny_model_config(**overrides)).to(dtype).eval()


def random_inputs(n: int, dim: int = 1, channels: int = 1, seed: int = 0, dtype=torch.float64):
    generator = torch.Generator().manual_seed(seed)
    coords = torch.rand(1, n, dim, generator=generator, dtype=dtype) * 0.999
    values = torch.randn(1, n, channels, generator=generator, dtype=dtype)
    return coords, values


class TestFourierEmbedding:
    """Test the positional embedding."""

    def test_origin_pattern(self):
        """At x = 0 the features alternate (cos 0, sin 0) = (1, 0)."""
        embedder = FourierFeatures(2, 0.0, 4.0, 16)
        features = embedder(torch.zeros(1, 2))
        assert features.shape == (1, 64)
        assert torch.all(features[0, 0::2] == 1.0)
        assert torch.all(features[0, 1::2] == 0.0)

    def test_frequency_set(self):
        """max_encoding_freq = 4 spans pi 2^0 .. pi 2^4 with 16 log-spaced samples."""
        frequencies = make_encoder(max_encoding_freq=4.0, num_freq_samples=16).embedder.frequencies
        assert len(frequencies) == 16
        assert frequencies[0].item() == pytest.approx(math.pi)
        assert frequencies[-1].item() == pytest.approx(16 * math.pi)
        ratios = frequencies[1:] / frequencies[:-1]
        torch.testing.assert_close(ratios, torch.full_like(ratios, ratios[0].item()))

    def test_bounded(self):
        """Feature entries lie in [-1, 1]."""
        coords, _ = random_inputs(50, dim=2)
        features = FourierFeatures(2, 0.0, 4.0).to(torch.float64)(coords)
        assert features.abs().max() <= 1.0

    def test_integer_periodic(self):
        """With integer frequencies gamma(0) = gamma(1-)."""
        embedder = FourierFeatures(1, 0.0, 4.0, integer=True).to(torch.float64)
        start = embedder(torch.zeros(1, 1, dtype=torch.float64))
        end = embedder(torch.full((1, 1), 1.0 - 1e-12, dtype=torch.float64))
        torch.testing.assert_close(start, end, atol=1e-9, rtol=0)


class TestEmbed:
    """Test the (positional, value) embedding step."""

    def test_shapes(self):
        """Both embeddings are N x d."""
        encoder = make_encoder()
        gamma, v = encoder.embed(*random_inputs(37))
        assert gamma.shape == v.shape == (1, 37, 16)

    def test_zero_values_without_bias(self):
        """u = 0 with a bias-free value embedding gives v = 0."""
        encoder = make_encoder(value_bias=False)
        coords, values = random_inputs(20)
        _, v = encoder.embed(coords, torch.zeros_like(values))
        assert torch.all(v == 0)

    def test_out_of_domain(self):
        """Coordinates outside [0, 1) raise DomainError."""
        encoder = make_encoder()
        coords, values = random_inputs(10)
        with pytest.raises(DomainError):
            encoder.embed(coords + 1.0, values)

    def test_empty(self):
        """N = 0 raises EmptyObservationSet."""
        encoder = make_encoder()
        coords = torch.zeros(1, 0, 1, dtype=torch.float64)
        with pytest.raises(EmptyObservationSet):
            encoder(coords, torch.zeros(1, 0, 1, dtype=torch.float64))


class TestGeometryEncoding:
    """Test the value-independent geometry pass."""

    def test_value_independent(self):
        """Same grid, different values: identical T_geo."""
        encoder = make_encoder(encode_geo=True)
        coords, values = random_inputs(30)
        gamma_a, _ = encoder.embed(coords, values)
        gamma_b, _ = encoder.embed(coords, 5.0 * values + 1.0)
        assert torch.equal(encoder.encode_geometry(gamma_a), encoder.encode_geometry(gamma_b))

    def test_permutation_invariant(self):
        """Permuting the points leaves T_geo unchanged."""
        encoder = make_encoder(encode_geo=True)
        coords, values = random_inputs(30)
        perm = torch.randperm(30, generator=torch.Generator().manual_seed(1))
        t_geo = encoder.encode_geometry(encoder.embed(coords, values)[0])
        permuted = encoder.encode_geometry(encoder.embed(coords[:, perm], values[:, perm])[0])
        torch.testing.assert_close(t_geo, permuted, atol=1e-10, rtol=1e-10)

    def test_disabled_is_identity(self):
        """encode_geo = False gives T_geo = T exactly."""
        encoder = make_encoder(encode_geo=False)
        gamma, _ = encoder.embed(*random_inputs(12))
        assert torch.equal(encoder.encode_geometry(gamma)[0], encoder.query)


class TestObservationEncoding:
    """Test the observation cross-attention and the bottleneck."""

    @pytest.mark.parametrize(
        "n_points", [37, 100, 1024, 4096], ids=["n37", "n100", "n1024", "n4096"]
    )
    def test_fixed_output_shape(self, n_points):
        """The latent is M x h for any number of observations."""
        encoder = make_encoder(dtype=torch.float32, encode_geo=True)
        latents = encoder(*random_inputs(n_points, dtype=torch.float32))
        assert latents.z.shape == (1, 4, 2)
        assert latents.mu.shape == latents.logsigma.shape == (1, 4, 2)

    @pytest.mark.parametrize("encode_geo", [False, True], ids=["no_geo", "geo"])
    def test_permutation_invariance(self, encode_geo):
        """mu(Pu) = mu(u) for a random point permutation."""
        encoder = make_encoder(encode_geo=encode_geo)
        coords, values = random_inputs(64)
        perm = torch.randperm(64, generator=torch.Generator().manual_seed(2))
        mu = encoder(coords, values).mu
        mu_perm = encoder(coords[:, perm], values[:, perm]).mu
        assert (mu - mu_perm).abs().max() < 1e-5 * mu.abs().max()

    def test_duplication_invariance(self):
        """Duplicating every observation leaves T_obs unchanged."""
        encoder = make_encoder(encode_geo=True)
        coords, values = random_inputs(25)
        mu = encoder(coords, values).mu
        doubled = encoder(torch.cat([coords, coords], dim=1), torch.cat([values, values], dim=1))
        doubled = doubled.mu
        torch.testing.assert_close(mu, doubled, atol=1e-5, rtol=1e-5)

    def test_zero_values_reach_ffn_only(self):
        """u = 0 with bias-free values: T_obs = T_geo + FFN(0-attention output)."""
        encoder = make_encoder(value_bias=False)
        coords, values = random_inputs(15)
        gamma, v = encoder.embed(coords, torch.zeros_like(values))
        t_geo = encoder.encode_geometry(gamma)
        t_obs = encoder.encode_observations(t_geo, gamma, v)
        expected = t_geo + encoder.obs_ff(torch.zeros_like(t_geo))
        torch.testing.assert_close(t_obs, expected)

    def test_eval_returns_mean(self):
        """In eval mode Z = mu."""
        encoder = make_encoder()
        latents = encoder(*random_inputs(20))
        assert torch.equal(latents.z, latents.mu)

    def test_train_samples_reproducibly(self):
        """In train mode Z is sampled; a fixed generator reproduces it."""
        encoder = make_encoder().train()
        coords, values = random_inputs(20)
        a = encoder(coords, values, generator=torch.Generator().manual_seed(3))
        b = encoder(coords, values, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a.z, b.z)
        assert not torch.equal(a.z, a.mu)

    def test_clamped_scale_collapses_sample(self):
        """A log-scale clamped far below zero makes Z = mu."""
        encoder = make_encoder(logsigma_clamp=(-30.0, -30.0))
        latents = encoder(*random_inputs(20), sample=True)
        torch.testing.assert_close(latents.z, latents.mu, atol=1e-12, rtol=0)

    def test_non_finite_bottleneck(self):
        """Non-finite mu raises EncoderNumericalError."""
        from src.errors import EncoderNumericalError

        encoder = make_encoder()
        with torch.no_grad():
            encoder.to_mu.bias.fill_(float("nan"))
        with pytest.raises(EncoderNumericalError):
            encoder(*random_inputs(10))


class TestAttentionCost:
    """Test that encoding cost is linear in N."""

    @pytest.mark.parametrize(
        "n_latents,n_points",
        [(4, 50), (8, 200), (16, 1000)],
        ids=["m4_n50", "m8_n200", "m16_n1000"],
    )
    def test_score_matrix_sizes(self, n_latents, n_points):
        """Each encoder attention is M x N; geometry adds another M x N."""
        encoder = make_encoder(dtype=torch.float32, encode_geo=True, num_latents=n_latents)
        with torch.no_grad(), count_attention() as counter:
            encoder(*random_inputs(n_points, dtype=torch.float32))
        assert counter.total("encoder") == 2 * n_latents * n_points
        for record in counter.records:
            assert (record.q_len, record.k_len) == (n_latents, n_points)

    def test_counter_inactive_outside_context(self):
        """Nothing is recorded once the context exits."""
        encoder = make_encoder(dtype=torch.float32)
        with count_attention() as counter:
            pass
        encoder(*random_inputs(10, dtype=torch.float32))
        assert counter.records == []


class TestSequenceDropout:
    """Test encoder point dropout."""

    def test_keeps_ninety_percent(self):
        """ratio 0.1 on 100 points keeps 90."""
        coords, values = random_inputs(100)
        kept_coords, kept_values = sequence_dropout(coords, values, 0.1)
        assert kept_coords.shape == (1, 90, 1)
        assert kept_values.shape == (1, 90, 1)

    def test_kept_points_are_pairs(self):
        """Kept coordinates and values stay paired."""
        coords, values = random_inputs(100)
        values = coords * 3.0
        kept_coords, kept_values = sequence_dropout(coords, values, 0.3)
        torch.testing.assert_close(kept_values, kept_coords * 3.0)

    def test_zero_ratio_identity(self):
        """ratio 0 returns the inputs."""
        coords, values = random_inputs(10)
        assert sequence_dropout(coords, values, 0.0)[0] is coords

    def test_eval_identity(self):
        """Dropout never applies outside training."""
        coords, values = random_inputs(10)
        assert sequence_dropout(coords, values, 0.5, training=False)[0] is coords

    @pytest.mark.parametrize("ratio", [1.0, -0.1], ids=["one", "negative"])
    def test_invalid_ratio(self, ratio):
        """Ratios outside [0, 1) raise InvalidRatio."""
        coords, values = random_inputs(10)
        with pytest.raises(InvalidRatio):
            sequence_dropout(coords, values, ratio)


class TestGradients:
    """Autodiff against central finite differences."""

    def test_encoder_gradcheck(self):
        """Gradient of ||mu||^2 w.r.t. all weights of a d=8, M=2 encoder, N=5."""
        encoder = make_encoder(
            hidden_dim=8,
            num_latents=2,
            latent_dim=2,
            cross_heads=2,
            cross_dim_head=4,
            num_freq_samples=2,
            encode_geo=True,
        )
        coords, values = random_inputs(5)
        names = [name for name, _ in encoder.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in encoder.parameters())

        def objective(*flat):
            mu = functional_call(encoder, dict(zip(names, flat)), (coords, values)).mu
            return (mu**2).sum()

        assert torch.autograd.gradcheck(objective, params, eps=1e-6, atol=1e-6, rtol=1e-4)
