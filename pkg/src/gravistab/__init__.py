"""Spherical steady states of the gravitational Vlasov-Poisson system and their stability functionals."""

__version__ = "0.1.0"
