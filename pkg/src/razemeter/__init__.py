"""razemeter: quantify built-environment change between before/after tile pairs."""

__version__ = "0.1.0"
