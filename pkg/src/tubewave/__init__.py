"""Logarithmic-time travelling waves of slow p-Laplacian diffusion in tubes."""

__version__ = "0.1.0"
