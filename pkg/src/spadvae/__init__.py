"""Convolutional VAE anomaly selection for sparse binary SPAD frames."""

__version__ = "0.1.0"
