"""Unsupervised optical flow for LiDAR range-image sequences."""

__version__ = "0.1.0"
