"""Patch-graph convolutional survival models for tiled slide images."""

__version__ = "0.1.0"
