"""Federated recommendation simulator with diffusion-generated cold-start item embeddings."""

__version__ = "0.1.0"
