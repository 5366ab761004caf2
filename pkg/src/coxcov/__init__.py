"""coxcov: covariate-driven Cox point processes, simulation and inference."""

__version__ = "0.1.0"
