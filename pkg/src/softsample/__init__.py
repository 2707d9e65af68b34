"""Soft sampling toolkit for training detectors with missing annotations."""

__version__ = "0.1.0"
