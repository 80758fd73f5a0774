"""Predict per-sample failures of a trained model with a second, meta model."""

__version__ = "0.1.0"
