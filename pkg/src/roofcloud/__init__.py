"""Point-cloud losses, staged point-set optimization and roof evaluation metrics."""

__version__ = "0.1.0"
