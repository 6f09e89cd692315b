"""Distance-aware attention: a small numpy transformer stack and the
experiments that probe how attention can measure Euclidean distance."""

from .model import MaskedLMModel, ModelConfig, TruncatedDistanceModel, count_parameters
from .results import ExperimentResult
from .training import MaskingSpec, SyntheticChainSpec, TrainConfig

__all__ = [
    "ExperimentResult",
    "MaskedLMModel",
    "MaskingSpec",
    "ModelConfig",
    "SyntheticChainSpec",
    "TrainConfig",
    "TruncatedDistanceModel",
    "count_parameters",
]

__version__ = "0.1.0"
