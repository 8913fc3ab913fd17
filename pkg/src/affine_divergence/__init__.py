"""Ideal-vs-effective update analysis for affine layers, with corrected layers and a training runner."""

__version__ = "0.1.0"
