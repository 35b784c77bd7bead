"""Conditional wavelet flows for light-field volume reconstruction."""
__version__ = "0.1.0"
