"""Explicit log-densities from generative maps.

A generator ``G: R^n -> R^m`` pushes a Gaussian prior onto an n-dimensional
manifold; the density of a generated point follows from the prior and the
Jacobian's metric tensor. Regressors trained on sampled (z, G(z), log p)
triplets then score arbitrary data vectors.
"""

__version__ = "0.1.0"
