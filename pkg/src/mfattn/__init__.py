"""Multi-head time-dependent attention dynamics of tokens on the sphere."""

__version__ = "0.1.0"
