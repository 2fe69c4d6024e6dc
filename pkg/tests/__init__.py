"""Unit tests for the latent-token PDE surrogate."""
