"""Constructive score estimation and diffusion sampling for Gaussian-process sequences."""

__version__ = "0.1.0"
