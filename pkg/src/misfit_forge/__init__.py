"""Biphase lattices, rigid tessellations and misfit transition energies."""

__version__ = "0.1.0"
