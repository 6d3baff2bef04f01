"""Pre-training readiness indices for federated learning."""

__version__ = "0.1.0"
