"""Speech emotion recognition with multi-attribute control and OOD scoring."""

from .errors import ConfigError, DataError, FeatureError, NumericalError
from .features import AugmentSpec, FBankFeatures, Waveform, compute_fbanks, fix_length, spec_augment
from .losses import AMSoftmaxParams, MSACWeights, am_softmax_loss, msac_total_loss, normalize_for_cosine
from .metrics import auroc, confusion_matrix, fpr95, uar, war
from .model import ModelConfig, SERNet, gradient_reverse

__version__ = "0.1.0"

__all__ = [
    "AMSoftmaxParams",
    "AugmentSpec",
    "ConfigError",
    "DataError",
    "FBankFeatures",
    "FeatureError",
    "MSACWeights",
    "ModelConfig",
    "NumericalError",
    "SERNet",
    "Waveform",
    "am_softmax_loss",
    "auroc",
    "compute_fbanks",
    "confusion_matrix",
    "fix_length",
    "fpr95",
    "gradient_reverse",
    "msac_total_loss",
    "normalize_for_cosine",
    "spec_augment",
    "uar",
    "war",
]
