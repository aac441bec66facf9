"""Anatomy-guided 3D MRI classification toolkit."""

__version__ = "0.1.0"
