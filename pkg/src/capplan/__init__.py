"""Procedure planning from start/goal observations with caption-supervised context."""

__version__ = "0.1.0"
