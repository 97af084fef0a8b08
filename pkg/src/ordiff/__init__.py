"""Ordered absorbing discrete diffusion over categorical sequences."""

__version__ = "0.1.0"
