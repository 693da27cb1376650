"""Pedestrian trajectory forecasting on social interaction graphs."""

__version__ = "0.1.0"
