"""Meme detection: visual part extraction, dataset composition and a ViT with trainable attention."""

__version__ = "0.1.0"
