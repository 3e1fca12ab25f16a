"""Influence-guided CAMs for weakly supervised segmentation at desk scale."""

__version__ = "0.1.0"
