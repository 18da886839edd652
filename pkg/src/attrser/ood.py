"""Post-hoc OOD scores. Every score is oriented so that higher means more ID.

``model`` arguments are callables mapping an input batch to emotion logits.
ReACT and Mahalanobis additionally need ``model.embed(x)`` and
``model.logits_from_embedding(e)`` (see :class:`attrser.model.EmotionLogits`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import ConfigError, DataError

KINDS = ("maxlogit", "odin", "rodin", "react", "mahalanobis")


@dataclass(frozen=True)
class DetectorKind:
    kind: str
    temperature: float = 1000.0
    eps: float = 0.0014
    percentile: float = 90.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown detector {self.kind!r}; choose from {KINDS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0")
        if not 0 < self.percentile <= 100:
            raise ConfigError("percentile must lie in (0, 100]")

    @property
    def needs_fit(self) -> bool:
        return self.kind in ("react", "mahalanobis")


@dataclass
class FittedDetector:
    kind: DetectorKind
    means: np.ndarray | None = None
    precision: np.ndarray | None = None
    covariance: np.ndarray | None = None
    clip: float | None = None

    def score(self, model, x) -> np.ndarray:
        return score_batch(model, x, self)


@dataclass
class OODScoreSet:
    detector: DetectorKind
    id_scores: np.ndarray
    ood_scores: np.ndarray
    id_ids: list = field(default_factory=list)
    ood_ids: list = field(default_factory=list)


def score_maxlogit(logits) -> np.ndarray:
    logits = torch.as_tensor(logits)
    return logits.max(dim=-1).values.detach().cpu().numpy()


def max_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    logits = torch.as_tensor(logits)
    return torch.softmax(logits / temperature, dim=-1).max(dim=-1).values.detach().cpu().numpy()


def energy(logits) -> np.ndarray:
    logits = torch.as_tensor(logits)
    return torch.logsumexp(logits, dim=-1).detach().cpu().numpy()


def confidence_gradient(model, x: torch.Tensor, temperature: float) -> torch.Tensor:
    """d/dx of log max_k softmax(model(x) / T), per sample."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        if not isinstance(logits, torch.Tensor) or logits.grad_fn is None:
            raise ConfigError("input perturbation needs a model differentiable w.r.t. its input")
        log_probs = torch.log_softmax(logits / temperature, dim=-1)
        objective = log_probs.max(dim=-1).values.sum()
        (grad,) = torch.autograd.grad(objective, x)
    return grad


def perturb_input(model, x, temperature: float, eps: float, direction: int = 1):
    """x + direction * eps * sign(grad). direction=+1 is ODIN, -1 the reversed variant."""
    x = torch.as_tensor(x)
    if eps == 0:
        return x
    grad = confidence_gradient(model, x, temperature)
    return (x + direction * eps * torch.sign(grad)).detach()


def _temperature_msp(model, x, temperature, eps, direction):
    x_used = perturb_input(model, x, temperature, eps, direction)
    with torch.no_grad():
        return max_softmax(model(x_used), temperature)


def score_odin(model, x, temperature: float = 1000.0, eps: float = 0.0014) -> np.ndarray:
    return _temperature_msp(model, x, temperature, eps, +1)


def score_rodin(model, x, temperature: float = 1000.0, eps: float = 0.0014) -> np.ndarray:
    """ODIN with the perturbation pushed against the confidence gradient."""
    return _temperature_msp(model, x, temperature, eps, -1)


def fit_react(embeddings, percentile: float = 90.0) -> FittedDetector:
    """Clip value = the given percentile over every ID activation entry."""
    acts = np.asarray(embeddings, dtype=np.float64)
    if acts.size == 0:
        raise DataError("cannot fit ReACT on zero activations")
    spec = DetectorKind("react", percentile=percentile)
    return FittedDetector(spec, clip=float(np.percentile(acts, percentile)))


def react_energy(model, embeddings, clip: float) -> np.ndarray:
    embeddings = torch.as_tensor(embeddings)
    clipped = torch.clamp(embeddings, max=clip)
    with torch.no_grad():
        return energy(model.logits_from_embedding(clipped))


def score_react(model, x, fitted: FittedDetector) -> np.ndarray:
    if fitted is None or fitted.clip is None:
        raise ConfigError("ReACT detector has not been fitted")
    with torch.no_grad():
        emb = model.embed(torch.as_tensor(x))
    return react_energy(model, emb, fitted.clip)


def fit_mahalanobis(embeddings, labels, num_classes: int | None = None) -> FittedDetector:
    """Class means plus one shared covariance, ridge-regularised, inverted."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DataError("embeddings must be (N, D) with one label per row")
    if y.size == 0:
        raise DataError("cannot fit Mahalanobis on zero embeddings")
    k = num_classes if num_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"labels must lie in [0, {k})")
    counts = np.bincount(y, minlength=k)
    if np.any(counts < 1):
        empty = [c for c in range(k) if counts[c] < 1]
        raise DataError(f"Mahalanobis fit needs >= 1 sample per class; empty: {empty}")
    means = np.stack([x[y == c].mean(axis=0) for c in range(k)])
    centered = x - means[y]
    cov = centered.T @ centered / x.shape[0]
    dim = cov.shape[0]
    ridge = max(1e-3 * np.trace(cov) / dim, 1e-6)
    cov = cov + ridge * np.eye(dim)
    cov = 0.5 * (cov + cov.T)
    precision = np.linalg.inv(cov)
    precision = 0.5 * (precision + precision.T)
    return FittedDetector(DetectorKind("mahalanobis"), means=means, precision=precision, covariance=cov)


def score_mahalanobis(embedding, fitted: FittedDetector) -> np.ndarray:
    """-min_k (x - mu_k)^T P (x - mu_k); accepts one vector or a (N, D) batch."""
    if fitted is None or fitted.means is None:
        raise ConfigError("Mahalanobis detector has not been fitted")
    x = np.asarray(embedding, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != fitted.means.shape[1]:
        raise DataError(f"embedding dim {x.shape[1]} != fitted dim {fitted.means.shape[1]}")
    diff = x[:, None, :] - fitted.means[None, :, :]
    dist = np.einsum("nkd,de,nke->nk", diff, fitted.precision, diff)
    scores = -dist.min(axis=1)
    return scores[0] if single else scores


def fit_detector(kind: DetectorKind, embeddings=None, labels=None, num_classes=None) -> FittedDetector:
    if kind.kind == "react":
        fitted = fit_react(embeddings, kind.percentile)
        fitted.kind = kind
        return fitted
    if kind.kind == "mahalanobis":
        fitted = fit_mahalanobis(embeddings, labels, num_classes)
        fitted.kind = kind
        return fitted
    return FittedDetector(kind)


def score_batch(model, x, fitted: FittedDetector) -> np.ndarray:
    kind = fitted.kind
    x = torch.as_tensor(x)
    if kind.kind == "maxlogit":
        with torch.no_grad():
            return score_maxlogit(model(x))
    if kind.kind == "odin":
        return score_odin(model, x, kind.temperature, kind.eps)
    if kind.kind == "rodin":
        return score_rodin(model, x, kind.temperature, kind.eps)
    if kind.kind == "react":
        return score_react(model, x, fitted)
    with torch.no_grad():
        emb = model.embed(x)
    return np.atleast_1d(score_mahalanobis(emb.cpu().numpy(), fitted))


def iter_inputs(inputs) -> Iterable[torch.Tensor]:
    """A tensor/array is one batch; a list is scored one utterance at a time.

    Floating tensors keep their dtype; arrays become float32.
    """
    if isinstance(inputs, torch.Tensor) and inputs.is_floating_point():
        yield inputs
        return
    if isinstance(inputs, (torch.Tensor, np.ndarray)):
        yield torch.as_tensor(inputs, dtype=torch.float32)
        return
    for item in inputs:
        yield torch.as_tensor(np.asarray(item), dtype=torch.float32)[None]


def collect_embeddings(model, inputs) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for x in iter_inputs(inputs):
            chunks.append(model.embed(x).cpu().numpy())
    return np.concatenate(chunks, axis=0)


def _score_all(model, fitted, inputs) -> np.ndarray:
    parts = [np.atleast_1d(score_batch(model, x, fitted)) for x in iter_inputs(inputs)]
    if not parts:
        raise DataError("cannot score an empty set")
    return np.concatenate(parts).astype(np.float64)


def evaluate_detector(model, fitted: FittedDetector, id_set, ood_set, id_ids=None, ood_ids=None) -> OODScoreSet:
    if hasattr(model, "eval"):
        model.eval()
    id_scores = _score_all(model, fitted, id_set)
    ood_scores = _score_all(model, fitted, ood_set)
    return OODScoreSet(
        fitted.kind,
        id_scores,
        ood_scores,
        list(id_ids) if id_ids is not None else [f"id_{i}" for i in range(len(id_scores))],
        list(ood_ids) if ood_ids is not None else [f"ood_{i}" for i in range(len(ood_scores))],
    )


def write_scores_csv(path: str | Path, scores: OODScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "set", "score"])
        for uid, s in zip(scores.id_ids, scores.id_scores):
            writer.writerow([uid, "id", repr(float(s))])
        for uid, s in zip(scores.ood_ids, scores.ood_scores):
            writer.writerow([uid, "ood", repr(float(s))])
