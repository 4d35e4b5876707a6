"""Decoder-only streaming transformer for simultaneous translation."""

from .model import DST, ModelConfig, decision_aggregate

__all__ = ["DST", "ModelConfig", "decision_aggregate"]
__version__ = "0.1.0"
