"""Laplacian diffusion: multi-band forward noising and resolution-switching samplers."""

__version__ = "0.1.0"
