"""Post-earthquake assessment of instrumented buildings."""

__version__ = "0.1.0"
