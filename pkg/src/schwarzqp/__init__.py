"""Overlapping Schwarz decomposition for graph-structured convex QPs."""

__version__ = "0.1.0"
