"""Stochastic analysis on evolving manifolds: Brownian paths, parallel transport, path-space gradients."""

__version__ = "0.1.0"
