"""Gated attention fusion of raw, interpolated and neural-DE latent streams."""

__version__ = "0.1.0"
