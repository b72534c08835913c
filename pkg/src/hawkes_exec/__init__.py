"""Optimal liquidation under regime-modulated Hawkes order flow."""
from .model import ModelParams, ReducedState, FullState

__all__ = ["ModelParams", "ReducedState", "FullState"]
__version__ = "0.1.0"
