"""Denoising-diffusion generation of desk-scale indoor object sets."""

__version__ = "0.1.0"
