"""TransXNet toolkit: a numpy tensor engine with reverse-mode autodiff, the
dual dynamic token mixer and its building blocks, the T/S/B networks, cost
accounting, effective receptive fields and gradient checks.
"""
from .analysis import (CostReport, ErfMap, count_flops, count_params, erf_map, grad_check, idconv_oracle,
                       seeded_images)
from .errors import CheckFailure, ConfigError, ContractError, SelectorError, ShapeError, SizeError, TxNetError
from .network import Model, ModelConfig, StageConfig, build_model, forward_classify, micro_config, variant_config
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "CheckFailure", "ConfigError", "ContractError", "CostReport", "ErfMap", "Model", "ModelConfig",
    "SelectorError", "ShapeError", "SizeError", "StageConfig", "Tensor", "TxNetError", "backward",
    "build_model", "count_flops", "count_params", "erf_map", "forward_classify", "grad_check",
    "idconv_oracle", "micro_config", "seeded_images", "variant_config",
]
