"""Transformer language-modeling lab: per-layer attention masks versus position embeddings."""

__version__ = "0.1.0"
