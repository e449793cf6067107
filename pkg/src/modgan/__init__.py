"""Composable mask-gated GAN modules for multi-attribute image generation and translation."""

__version__ = "0.1.0"
