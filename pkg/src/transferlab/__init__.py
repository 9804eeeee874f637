"""Ulam discretisation of twisted transfer operators: invariant densities,
CLT variances, large-deviation rate functions and escape rates."""

__version__ = "0.1.0"
