"""Moment-propagation Bayesian networks with uncertainty-guided continual learning."""

__version__ = "0.1.0"
