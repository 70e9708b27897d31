"""Conditional flow matching with latent features from a VAE encoder or a GMM."""

__version__ = "0.1.0"
