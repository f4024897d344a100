"""Diffusion-model reconstruction and characterisation of two-phase random microstructures."""

__version__ = "0.1.0"
