"""Neural-network free functions inside boundary-exact constrained expressions."""

__version__ = "0.1.0"
