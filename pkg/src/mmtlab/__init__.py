"""Desk-scale multimodal bottleneck transformers with missing-modality tools."""

__version__ = "0.1.0"
