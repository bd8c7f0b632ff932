"""Sequence-to-sequence enhancement model and its training loop."""

from .config import Mode, ModelConfig, micro_config, toy_config
from .network import LossBreakdown, TecModel, compute_loss, variant_factory

__all__ = ["LossBreakdown", "Mode", "ModelConfig", "TecModel", "compute_loss", "micro_config",
           "toy_config", "variant_factory"]
