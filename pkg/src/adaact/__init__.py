"""Weakly-supervised action segmentation with interaction-conditioned classifier heads."""

__version__ = "0.1.0"
