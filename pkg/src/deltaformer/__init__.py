"""Delegate-token attention forecasting laboratory."""

__version__ = "0.1.0"
