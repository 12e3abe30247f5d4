"""Map-conditioned steering distributions, pose posteriors and map matching."""

__version__ = "0.1.0"
