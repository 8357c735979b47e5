"""Alignment-level-conditioned captioning on a synthetic image-text micro-world."""

__version__ = "0.1.0"
