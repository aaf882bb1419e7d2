"""Recurrent explicit-duration switching dynamical systems."""

from .hsmm import DiscretePosterior, DPInputs
from .model import ControlConfig, DurationTable, ModelConfig, RedSDS

__all__ = ["ControlConfig", "DPInputs", "DiscretePosterior", "DurationTable", "ModelConfig", "RedSDS"]
