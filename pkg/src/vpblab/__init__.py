"""Numerical laboratory for decay of perturbations in the Vlasov-Poisson-Boltzmann system."""

__version__ = "0.1.0"
