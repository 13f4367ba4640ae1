"""Numerical laboratory for stochastically forced travelling waves.

Simulates reaction-diffusion fronts under spatially correlated noise in a
co-moving ("frozen") frame, builds the small-noise expansion hierarchy on
shared noise paths, monitors stability events, and evaluates the limiting
expectations (stationary covariance, wave-speed correction, functional
coefficients) both deterministically and by Monte-Carlo ensembles.
"""

__version__ = "0.1.0"
