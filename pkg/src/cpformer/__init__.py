"""Pattern-tokenized transformer for multi-label 12-lead ECG classification."""

from .config import CLASS_NAMES, LEAD_NAMES, ModelConfig, profile
from .errors import (ConfigurationError, ContractError, CpfError, DimensionError, GraphError,
                     InputError, NumericHealthError)
from .model import CardioPatternFormer, build_model

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "LEAD_NAMES", "ModelConfig", "profile", "CardioPatternFormer", "build_model",
    "CpfError", "ConfigurationError", "ContractError", "DimensionError", "GraphError",
    "InputError", "NumericHealthError",
]
