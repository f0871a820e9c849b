"""Bottleneck-feature toolkit for text-dependent speaker verification."""

__version__ = "0.1.0"
