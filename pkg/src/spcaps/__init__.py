"""Superpixel capsule network: SLIC superpixels, superpixel pooling and capsule routing in numpy."""

__version__ = "0.1.0"
