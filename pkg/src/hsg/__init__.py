"""Unsupervised hierarchical segmentation by multiview cosegmentation and clustering transformers."""

__version__ = "0.1.0"
