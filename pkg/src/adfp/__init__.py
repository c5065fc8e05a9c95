"""Adversarial example detection from diffusion-model reconstruction fingerprints."""

__version__ = "0.1.0"
