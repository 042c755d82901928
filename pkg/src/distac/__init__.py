"""Distributional actor-critic toolkit: mixture value distributions, energy and
Cramer distances, SR(lambda) targets, a tabular Bellman lab and numpy agents."""

from .distcore import DiracMixture, GaussianMixture
from .metrics import energy_distance, energy_gmm

__all__ = ["DiracMixture", "GaussianMixture", "energy_distance", "energy_gmm"]
__version__ = "0.1.0"
