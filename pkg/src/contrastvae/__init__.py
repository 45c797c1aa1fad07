"""Contrastive variational autoencoder for next-item sequential recommendation."""

__version__ = "0.1.0"
