"""Additive-margin softmax and the weighted multi-attribute objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .model import cosine_similarity_matrix

AGNOSTIC = "agnostic"
CORRELATED = "correlated"

DEFAULT_ROLES = {"speaker": AGNOSTIC, "language": AGNOSTIC, "corpus": AGNOSTIC, "gender": CORRELATED}


@dataclass(frozen=True)
class AMSoftmaxParams:
    s: float = 30.0
    m: float = 0.2

    def __post_init__(self):
        if self.s <= 0:
            raise ConfigError("AM-Softmax scale s must be > 0")
        if self.m < 0:
            raise ConfigError("AM-Softmax margin m must be >= 0")


@dataclass
class MSACWeights:
    alpha: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = {k: float(v) for k, v in self.alpha.items()}
        roles = {k: DEFAULT_ROLES.get(k, AGNOSTIC) for k in self.alpha}
        roles.update(self.roles)
        self.roles = roles
        self.validate()

    @property
    def emotion_weight(self) -> float:
        return 1.0 - sum(self.alpha.values())

    def validate(self) -> None:
        for name, a in self.alpha.items():
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"alpha[{name}] = {a} outside [0, 1]")
        for name, role in self.roles.items():
            if role not in (AGNOSTIC, CORRELATED):
                raise ConfigError(f"role of {name!r} must be agnostic or correlated, got {role!r}")
        if self.emotion_weight <= 0.0:
            raise ConfigError(
                f"auxiliary weights sum to {sum(self.alpha.values())}; must stay below 1"
            )

    def agnostic(self) -> list[str]:
        return [k for k in self.alpha if self.roles[k] == AGNOSTIC]

    def correlated(self) -> list[str]:
        return [k for k in self.alpha if self.roles[k] == CORRELATED]


PRESETS = {
    "iemocap": {"speaker": 0.3, "gender": 0.2},
    "emodb": {"speaker": 0.1, "gender": 0.05},
    "cross_corpus": {"speaker": 0.15, "gender": 0.2, "language": 0.15},
    "none": {},
}


def preset_weights(name: str) -> MSACWeights:
    try:
        return MSACWeights(dict(PRESETS[name]))
    except KeyError:
        raise ConfigError(f"unknown weight preset {name!r}; choose from {sorted(PRESETS)}") from None


def normalize_for_cosine(features, class_weights, eps: float = 1e-12):
    features = torch.as_tensor(features)
    class_weights = torch.as_tensor(class_weights, dtype=features.dtype)
    return cosine_similarity_matrix(features, class_weights, eps)


def am_softmax_loss(cosines, labels, params: AMSoftmaxParams = AMSoftmaxParams()):
    """Mean over the batch of -log softmax after subtracting ``m`` from the target cosine.

    ``cosines`` is (N, K); the margin only touches the target column.
    """
    cosines = torch.as_tensor(cosines)
    labels = torch.as_tensor(labels, dtype=torch.long, device=cosines.device)
    if cosines.dim() != 2 or cosines.shape[0] == 0:
        raise ValueError("am_softmax_loss needs a non-empty (batch, classes) matrix")
    if labels.shape != (cosines.shape[0],):
        raise ValueError(f"labels shape {tuple(labels.shape)} != ({cosines.shape[0]},)")
    num_classes = cosines.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes})")

    target_mask = torch.zeros_like(cosines, dtype=torch.bool)
    target_mask.scatter_(1, labels.view(-1, 1), True)
    logits = params.s * (cosines - params.m * target_mask.to(cosines.dtype))
    if num_classes == 1:
        return logits.sum() * 0.0
    # -log p_y = log(1 + sum_{j != y} e^{z_j - z_y}) = softplus(logsumexp_{j != y}(z_j - z_y));
    # this keeps full relative precision when the loss is tiny
    target = logits.gather(1, labels.view(-1, 1))
    rest = torch.logsumexp((logits - target).masked_fill(target_mask, float("-inf")), dim=1)
    return F.softplus(rest, threshold=30.0).mean()


def msac_total_loss(emotion_loss, aux_losses: dict, weights: MSACWeights):
    """(1 - sum alpha) * L_emotion + sum over agnostic + sum over correlated.

    Agnostic losses enter with a positive sign; the adversarial effect
    comes from the gradient reversal in front of their heads.
    """
    weights.validate()
    missing = set(aux_losses) - set(weights.alpha)
    if missing:
        raise ConfigError(f"no weight configured for auxiliary losses {sorted(missing)}")
    absent = [k for k, a in weights.alpha.items() if a > 0 and k not in aux_losses]
    if absent:
        raise ConfigError(f"weighted auxiliary losses not supplied: {absent}")
    total = weights.emotion_weight * emotion_loss
    for name in weights.agnostic() + weights.correlated():
        if name in aux_losses:
            total = total + weights.alpha[name] * aux_losses[name]
    return total
