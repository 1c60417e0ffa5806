"""Spot-level gene expression prediction from histology features with hypergraph encoders and expression prompts."""

__version__ = "0.1.0"
