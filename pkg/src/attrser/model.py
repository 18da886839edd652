"""CNN encoder with statistics pooling and per-attribute cosine heads.

Layout: three parallel shallow conv branches (11x1, 3x3, 9x1) merged by a 5x5
conv, a five-block deep stack, mean/std pooling over time, a two-block
projection, then one cosine-similarity head per speech attribute. Heads for
emotion-agnostic attributes sit behind a gradient reversal layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

# (kernel sizes, channel_in, channel_out) for each deep block
REFERENCE_BLOCKS: tuple = (
    (((5, 5), (3, 3)), 96, 32),
    (((3, 3), (1, 1)), 32, 64),
    (((3, 3), (1, 1)), 64, 128),
    (((3, 3), (1, 1)), 128, 256),
    (((3, 3), (1, 1)), 256, 256),
)
REFERENCE_CHAIN = [(96, 32, 32), (32, 64, 64), (64, 128, 128), (128, 256, 256), (256, 256, 256)]

AGNOSTIC_ATTRIBUTES = frozenset({"speaker", "language", "corpus"})
CORRELATED_ATTRIBUTES = frozenset({"gender"})


@dataclass
class ModelConfig:
    num_mel_bins: int = 80
    shallow_branch_kernels: list = field(default_factory=lambda: [(11, 1), (3, 3), (9, 1)])
    shallow_branch_channels: int = 32
    merge_kernel: tuple = (5, 5)
    deep_blocks: list = field(default_factory=lambda: [list(b) for b in REFERENCE_BLOCKS])
    embedding_dim: int = 256
    projection_dim: int = 512
    leaky_slope: float = 0.01
    attribute_heads: dict = field(default_factory=lambda: {"emotion": 4})
    agnostic_attributes: list = field(default_factory=lambda: sorted(AGNOSTIC_ATTRIBUTES))
    grl_lambda: float = 1.0

    def __post_init__(self):
        self.shallow_branch_kernels = [tuple(k) for k in self.shallow_branch_kernels]
        self.merge_kernel = tuple(self.merge_kernel)
        self.deep_blocks = [
            (tuple(tuple(k) for k in kernels), int(cin), int(cout))
            for kernels, cin, cout in self.deep_blocks
        ]
        self.attribute_heads = {str(k): int(v) for k, v in self.attribute_heads.items()}
        self.agnostic_attributes = list(self.agnostic_attributes)
        self.validate()

    @property
    def shallow_channels(self) -> int:
        return self.shallow_branch_channels * len(self.shallow_branch_kernels)

    def channel_chain(self) -> list[tuple[int, int, int]]:
        return [(cin, cout, cout) for _, cin, cout in self.deep_blocks]

    def validate(self) -> None:
        if "emotion" not in self.attribute_heads:
            raise ConfigError("attribute_heads must include 'emotion'")
        if any(n < 1 for n in self.attribute_heads.values()):
            raise ConfigError("every attribute head needs at least one class")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")
        if not self.deep_blocks:
            raise ConfigError("at least one deep block is required")
        if self.deep_blocks[0][1] != self.shallow_channels:
            raise ConfigError(
                f"deep block 1 expects {self.deep_blocks[0][1]} channels but the "
                f"shallow branches concatenate to {self.shallow_channels}"
            )
        for (_, _, prev_out), (_, cin, _) in zip(self.deep_blocks, self.deep_blocks[1:]):
            if prev_out != cin:
                raise ConfigError(f"deep block channel mismatch: {prev_out} -> {cin}")

    def is_reference_stack(self) -> bool:
        return [tuple(k for k in b[0]) for b in self.deep_blocks] == [
            b[0] for b in REFERENCE_BLOCKS
        ] and self.channel_chain() == [tuple(c) for c in REFERENCE_CHAIN]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deep_blocks"] = [[list(map(list, k)), cin, cout] for k, cin, cout in self.deep_blocks]
        d["shallow_branch_kernels"] = [list(k) for k in self.shallow_branch_kernels]
        d["merge_kernel"] = list(self.merge_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def reduced(cls, width: int = 4, **overrides) -> "ModelConfig":
        """Same topology with every channel count divided by ``32 // width``.

        Used by tests that need float64 finite differences on the full model.
        """
        scale = 32 // width
        blocks = [(k, cin // scale, cout // scale) for k, cin, cout in REFERENCE_BLOCKS]
        params = dict(
            shallow_branch_channels=width,
            deep_blocks=blocks,
            embedding_dim=16,
            projection_dim=32,
        )
        params.update(overrides)
        return cls(**params)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def gradient_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by -lambd on the way back."""
    if lambd < 0:
        raise ValueError("lambda must be >= 0")
    return _GradReverse.apply(x, float(lambd))


class GradientReversal(nn.Module):
    def __init__(self, lambd: float = 1.0):
        super().__init__()
        self.lambd = lambd

    def forward(self, x):
        return gradient_reverse(x, self.lambd)

    def extra_repr(self):
        return f"lambda={self.lambd}"


def _same_padding(kernel):
    # odd kernels only; every kernel in the architecture is odd
    return tuple(k // 2 for k in kernel)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, kernel):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=_same_padding(kernel), bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ShallowExtractor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.shallow_branch_channels
        self.branches = nn.ModuleList(
            ConvBNReLU(1, c, k) for k in config.shallow_branch_kernels
        )
        width = config.shallow_channels
        self.merge = nn.Conv2d(width, width, config.merge_kernel,
                               padding=_same_padding(config.merge_kernel), bias=False)
        self.pool = nn.AvgPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x):
        x = torch.cat([branch(x) for branch in self.branches], dim=1)
        return self.pool(self.merge(x))


class DeepBlock(nn.Sequential):
    def __init__(self, kernels, cin, cout):
        k1, k2 = kernels
        super().__init__(
            ConvBNReLU(cin, cout, k1),
            ConvBNReLU(cout, cout, k2),
            nn.AvgPool2d(2, stride=2, ceil_mode=True),
        )


class DeepExtractor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(DeepBlock(*b) for b in config.deep_blocks)
        self.in_channels = config.deep_blocks[0][1]

    def forward(self, x, trace: list | None = None):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"deep stack expects {self.in_channels} channels, got {x.shape[1]}")
        for block in self.blocks:
            x = block(x)
            if trace is not None:
                trace.append(x.shape[1])
        return x


def temporal_stats(x: torch.Tensor) -> torch.Tensor:
    """Mean and population std over time for a (B, C, T, F) map -> (B, 2*C*F)."""
    mean = x.mean(dim=2)
    # variance is shift invariant; offsetting by frame 0 makes constant maps exactly 0
    var = (x - x[:, :, :1]).var(dim=2, unbiased=False)
    # sqrt has an infinite slope at 0; route zero variance around it
    positive = var > 0
    std = torch.where(positive, torch.where(positive, var, torch.ones_like(var)).sqrt(), torch.zeros_like(var))
    return torch.cat([mean.flatten(1), std.flatten(1)], dim=1)


class AggregationPool(nn.Module):
    def __init__(self, in_features: int, config: ModelConfig):
        super().__init__()
        self.projection = nn.Sequential(
            nn.Linear(in_features, config.projection_dim),
            nn.BatchNorm1d(config.projection_dim),
            nn.LeakyReLU(config.leaky_slope),
            nn.Linear(config.projection_dim, config.embedding_dim),
            nn.BatchNorm1d(config.embedding_dim),
            nn.LeakyReLU(config.leaky_slope),
        )

    def forward(self, x):
        return self.projection(temporal_stats(x))


def cosine_similarity_matrix(features, class_weights, eps: float = 1e-12):
    """cos(theta_ji) = <x_i, w_j> / (|x_i| |w_j|) with a norm floor."""
    x = features / features.norm(dim=-1, keepdim=True).clamp_min(eps)
    w = class_weights / class_weights.norm(dim=-1, keepdim=True).clamp_min(eps)
    return (x @ w.t()).clamp(-1.0, 1.0)


class CosineHead(nn.Module):
    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        w = torch.randn(num_classes, embedding_dim)
        self.weight = nn.Parameter(w / w.norm(dim=1, keepdim=True))

    def forward(self, embedding):
        return cosine_similarity_matrix(embedding, self.weight)


@dataclass
class AttributeLogits:
    cosines: dict
    embedding: torch.Tensor


def _pooled_size(n: int, times: int) -> int:
    for _ in range(times):
        n = math.ceil(n / 2)
    return n


class SERNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.shallow = ShallowExtractor(config)
        self.deep = DeepExtractor(config)
        freq = _pooled_size(config.num_mel_bins, 1 + len(config.deep_blocks))
        self.pool = AggregationPool(2 * config.deep_blocks[-1][2] * freq, config)
        self.grl = GradientReversal(config.grl_lambda)
        self.heads = nn.ModuleDict(
            {name: CosineHead(config.embedding_dim, n) for name, n in config.attribute_heads.items()}
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def is_agnostic(self, name: str) -> bool:
        return name in self.config.agnostic_attributes

    def _check_input(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1:
            raise ConfigError(f"expected input (B, 1, T, F), got {tuple(x.shape)}")
        if x.shape[-1] != self.config.num_mel_bins:
            raise ConfigError(
                f"input has {x.shape[-1]} mel bins, model expects {self.config.num_mel_bins}"
            )
        return x

    def embed(self, x, trace: list | None = None):
        x = self._check_input(x)
        h = self.shallow(x)
        if trace is not None:
            trace.append(h.shape[1])
        return self.pool(self.deep(h, trace))

    def head_cosines(self, embedding, name: str):
        if name not in self.heads:
            raise ConfigError(f"unknown attribute head {name!r}")
        if self.is_agnostic(name):
            embedding = self.grl(embedding)
        return self.heads[name](embedding)

    def forward(self, x, heads=None, trace: list | None = None) -> AttributeLogits:
        embedding = self.embed(x, trace)
        names = list(self.heads) if heads is None else list(heads)
        cosines = {name: self.head_cosines(embedding, name) for name in names}
        return AttributeLogits(cosines, embedding)


class EmotionLogits(nn.Module):
    """Adapter exposing ``scale * cos`` of the emotion head as plain logits."""

    def __init__(self, net: SERNet, scale: float = 30.0):
        super().__init__()
        self.net = net
        self.scale = scale

    def embed(self, x):
        return self.net.embed(x)

    def logits_from_embedding(self, embedding):
        return self.scale * self.net.heads["emotion"](embedding)

    def forward(self, x):
        return self.logits_from_embedding(self.embed(x))


def save_checkpoint(path: str | Path, net: SERNet, **extra) -> None:
    """Archive = state dict + JSON model config + caller metadata (JSON-able)."""
    payload = {
        "state_dict": net.state_dict(),
        "model_config": json.dumps(net.config.to_dict()),
        "extra": json.dumps(extra),
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, require_reference: bool = True):
    """Return ``(net, extra)``; the net is left in eval mode."""
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    config = ModelConfig.from_dict(json.loads(payload["model_config"]))
    if require_reference and not config.is_reference_stack():
        raise ConfigError(
            f"checkpoint deep stack {config.channel_chain()} does not match {REFERENCE_CHAIN}"
        )
    net = SERNet(config)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, json.loads(payload["extra"])
