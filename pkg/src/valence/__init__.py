"""Time-series valence recognition from multimodal narrative features."""

__version__ = "0.1.0"
