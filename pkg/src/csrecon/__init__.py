"""Dual-domain cascades of U-nets for multi-coil compressed-sensing MRI reconstruction."""

__version__ = "0.1.0"
