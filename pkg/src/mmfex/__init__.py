"""Multimodal item feature extraction, fusion and recommendation benchmarking."""

__version__ = "0.1.0"
