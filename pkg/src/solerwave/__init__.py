"""Soler-type nonlinear Dirac standing waves: profiles, linearization, spectra and dynamics."""

__version__ = "0.1.0"
