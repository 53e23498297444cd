"""Multimodal-aligned retrieval augmentation for sequence CTR models."""

__version__ = "0.1.0"
