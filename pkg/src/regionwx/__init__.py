"""Boundary-conditioned regional weather emulation with latent-diffusion precipitation diagnosis."""

__version__ = "0.1.0"
