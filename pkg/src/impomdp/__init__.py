"""Inspection and maintenance planning for a single deteriorating component."""

__version__ = "0.1.0"
