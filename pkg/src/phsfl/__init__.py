"""Personalized hierarchical split federated learning: simulator, comm accounting and bounds."""

__version__ = "0.1.0"
