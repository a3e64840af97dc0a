"""Exploratory hierarchical factor analysis.

Learns a tree of orthogonal latent factors, with nested zero patterns in
the loading matrix, from a covariance matrix.
"""

__version__ = "0.1.0"
