"""Blind adversarial training for small dense networks."""

__version__ = "0.1.0"
