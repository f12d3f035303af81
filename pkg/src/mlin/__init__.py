"""Multi-modality latent interaction network (MLIN) on a small float64 autograd core."""

from .mli import AttentionTrace, ConfigError, MliConfig, MliLayerParams, mli_forward, parameter_count
from .network import MlinModel, evaluate, forward, gradcheck, loss

__all__ = [
    "AttentionTrace",
    "ConfigError",
    "MliConfig",
    "MliLayerParams",
    "MlinModel",
    "evaluate",
    "forward",
    "gradcheck",
    "loss",
    "mli_forward",
    "parameter_count",
]

__version__ = "0.1.0"
