"""Lung segmentation by conditional-GAN image translation."""

__version__ = "0.1.0"
