"""Weakly supervised temporal action localization with latent change-point detection."""
__version__ = "0.1.0"
