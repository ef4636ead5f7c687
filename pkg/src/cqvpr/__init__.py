"""Contextual-query visual place recognition."""

__version__ = "0.1.0"
