"""Matching neural representations with affine stitching layers."""

__version__ = "0.1.0"
