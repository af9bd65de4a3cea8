"""Attention over object embeddings for dynamic visual reasoning,
with synthetic desk-scale task families and a self-contained numeric core."""

__version__ = "0.1.0"
