"""Grouped-instance detection cascades for sparse, small-object imagery."""

__version__ = "0.1.0"
