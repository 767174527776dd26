"""Pareto-weighted multi-objective pre-ranking with forgetting-curve feedback penalties."""

__version__ = "0.1.0"
