"""Residual dense attention fusion networks for image deblurring, on a small numpy autodiff engine."""

from .blocks import RDAFB, RDB, AttentionFusionModule, AttentionModule, RDAFBConfig
from .network import NetworkConfig, RDAFNet, count_params, estimate_flops, multi_stage_config, single_stage_config
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "RDAFB", "RDB", "AttentionFusionModule", "AttentionModule", "RDAFBConfig",
    "NetworkConfig", "RDAFNet", "count_params", "estimate_flops", "multi_stage_config", "single_stage_config",
    "Tensor",
]
