"""Temporal stabilization toolkit for per-frame depth/normal predictors."""

__version__ = "0.1.0"
