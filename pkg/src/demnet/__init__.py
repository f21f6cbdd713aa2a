"""Monocular DEM estimation from single SAR SLC images with a convolutional encoder-decoder."""

__version__ = "0.1.0"
