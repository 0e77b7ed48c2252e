"""Latent-space learned Kalman filtering toolkit."""

__version__ = "0.1.0"
