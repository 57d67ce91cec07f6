"""Heterogeneous federated learning by learning on model parameters."""

__version__ = "0.1.0"
