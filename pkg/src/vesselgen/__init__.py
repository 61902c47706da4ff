"""Generative modelling of binary vessel trees: a recursive variational
autoencoder over centerline trees, surface meshing and population metrics."""

__version__ = "0.1.0"
