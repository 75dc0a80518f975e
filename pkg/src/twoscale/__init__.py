"""Two-scale effective models for Dirac cones in honeycomb superlattices."""

__version__ = "0.1.0"
