"""Atrous-window visual state space blocks and siamese change-detection
networks on a minimal numpy autodiff engine."""

__version__ = "0.1.0"
