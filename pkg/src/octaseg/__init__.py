"""Cascaded multi-task lesion and vessel segmentation with graph reasoning."""

__version__ = "0.1.0"
