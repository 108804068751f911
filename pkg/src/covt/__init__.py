"""Desk-scale chain-of-visual-thought training and inference."""
from .core import CovtConfig, ThoughtChain, TokenSchema, VisualSlot, load_config, validate_config
from .errors import CovtError

__version__ = "0.1.0"

__all__ = [
    "CovtConfig",
    "CovtError",
    "ThoughtChain",
    "TokenSchema",
    "VisualSlot",
    "load_config",
    "validate_config",
]
