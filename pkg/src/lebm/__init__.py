"""Latent-space energy-based prior models learned with short-run Langevin MCMC."""

__version__ = "0.1.0"
