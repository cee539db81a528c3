"""Mask-conditioned synthesis of fluoroscopy-like videos with diffusion models."""

__version__ = "0.1.0"
