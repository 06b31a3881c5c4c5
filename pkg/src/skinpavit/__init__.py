"""Skin hydration and TEWL regression from facial image patches."""

__version__ = "0.1.0"
