"""Monte Carlo toolkit for the stochastic maximum principle with fractional noise."""

__version__ = "0.1.0"
