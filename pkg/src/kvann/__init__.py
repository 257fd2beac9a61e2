"""Graph-based approximate nearest-neighbor index over an ordered key-value store."""

__version__ = "0.1.0"
