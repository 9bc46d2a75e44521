"""Desk-scale music representation learning toolkit."""

__version__ = "0.1.0"
