"""Unit-level Grow/Prune structural plasticity on masked MLPs and ConvNets."""

from .budget import CompactnessPlan, plan_targets
from .config import RunConfig, parse_config
from .errors import ConfigError, DataFormatError, NumericFault, StructuralEditError
from .nn import MaskedNetwork, RSLParams, backward, forward

__version__ = "0.1.0"

__all__ = ["CompactnessPlan", "ConfigError", "DataFormatError", "MaskedNetwork", "NumericFault",
           "RSLParams", "RunConfig", "StructuralEditError", "backward", "forward", "parse_config",
           "plan_targets"]
