"""Recurrent spectral neural networks for physical-model audio synthesis."""

__version__ = "0.1.0"
