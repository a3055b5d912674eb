"""Procedural kernel networks."""
__version__ = "0.1.0"
