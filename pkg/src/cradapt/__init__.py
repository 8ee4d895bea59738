"""Adaptive Crouzeix-Raviart finite elements for Laplace eigenvalue clusters."""

__version__ = "0.1.0"
