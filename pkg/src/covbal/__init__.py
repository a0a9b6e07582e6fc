"""Balanced reduction of an external power-system area with empirical
covariances, and partitioned co-simulation against a detailed study area."""

__version__ = "0.1.0"
