"""Attributed-graph clustering on a product of constant-curvature manifolds."""

__version__ = "0.1.0"
