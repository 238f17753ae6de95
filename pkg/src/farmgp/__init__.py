"""Bayesian nonparametric transmission kernels for spatial outbreaks of
farm-level disease, fitted by data-augmentation MCMC."""

__version__ = "0.1.0"
