"""Diffusion-based person search: joint detection and re-identification by
dual denoising over bounding boxes and identity embeddings."""

__version__ = "0.1.0"
