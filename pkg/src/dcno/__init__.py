"""Dilated convolution neural operator lab."""

__version__ = "0.1.0"
