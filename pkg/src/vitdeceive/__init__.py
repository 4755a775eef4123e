"""Interpretation-preserving adversarial attacks on toy vision transformers."""

__version__ = "0.1.0"
