"""Optimistic model-based RL with GP dynamics models."""

__version__ = "0.1.0"
