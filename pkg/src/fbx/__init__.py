"""Finite-blocklength bounds for two-user common-message broadcast channels with feedback."""

__version__ = "0.1.0"
