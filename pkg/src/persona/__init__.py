"""Latent-conditioned Gaussian splatting head avatars with attribute editing."""

__version__ = "0.1.0"
