"""Gradient-alignment pruning for contrastive embedding encoders, at desk scale."""

__version__ = "0.1.0"
