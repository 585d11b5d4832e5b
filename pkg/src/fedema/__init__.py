"""Federated continual learning with server-side EMA fusion and entropy-regularised clients."""

__version__ = "0.1.0"
