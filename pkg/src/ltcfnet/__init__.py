"""Dual color-space low-light image enhancement on a small numpy autodiff engine."""
from .model import LtcfNet, ModelConfig, build, count_params, estimate_flops

__version__ = "0.1.0"

__all__ = ["LtcfNet", "ModelConfig", "build", "count_params", "estimate_flops", "__version__"]
