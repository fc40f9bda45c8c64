"""BSDEs driven by laglad drivers up to a random horizon, with reduction to the reference filtration."""

__version__ = "0.1.0"
