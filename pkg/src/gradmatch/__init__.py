"""Recover implicit regularisers from trained weights by gradient matching."""

__version__ = "0.1.0"
