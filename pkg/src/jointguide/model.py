"""Skeleton encoder, classifier heads and the classification loss.

Tensors use the (batch, channels, frames, joints) layout throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, StateError
from .graph import SkeletonGraph

PROB_FLOOR = 1e-12


def gcn_layer(x: torch.Tensor, a_norm: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """ReLU(Â X W) applied per frame.

    ``x`` is (..., C_in, T, V), ``a_norm`` the (V, V) normalized adjacency and
    ``weight`` (C_in, C_out). Returns (..., C_out, T, V).
    """
    if x.dim() < 3:
        raise ConfigurationError(f"expected (..., C, T, V) input, got {tuple(x.shape)}")
    c_in, v = x.shape[-3], x.shape[-1]
    if a_norm.shape != (v, v):
        raise ConfigurationError(
            f"adjacency is {tuple(a_norm.shape)} but input has V={v} joints"
        )
    if weight.dim() != 2 or weight.shape[0] != c_in:
        raise ConfigurationError(
            f"weight is {tuple(weight.shape)} but input has C={c_in} channels"
        )
    mixed = torch.matmul(x, a_norm.transpose(0, 1))  # sum_u x[..., u] Â[v, u]
    out = torch.einsum("...ctv,co->...otv", mixed, weight)
    return F.relu(out)


def classify(feat: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Softmax class distribution from a (..., C, T, V) feature map."""
    pooled = feat.mean(dim=(-2, -1))
    return torch.softmax(F.linear(pooled, weight, bias), dim=-1)


def cross_entropy(pred, label) -> torch.Tensor:
    """-log pred[label] with a floor on the selected probability.

    Accepts a single distribution with an integer label or a batch of
    distributions with a label vector (mean over the batch).
    """
    pred = torch.as_tensor(pred)
    label = torch.as_tensor(label, dtype=torch.long)
    num_classes = pred.shape[-1]
    if torch.any(label < 0) or torch.any(label >= num_classes):
        raise ValueError(f"label {label.tolist()} out of range [0, {num_classes})")
    picked = pred.gather(-1, label.reshape(*label.shape, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def _kaiming_uniform_(t: torch.Tensor, fan_in: int, generator: torch.Generator):
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)


class GraphConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, a_norm: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels))
        self.register_buffer("a_norm", a_norm.clone())

    def forward(self, x):
        return gcn_layer(x, self.a_norm, self.weight)


class TemporalConv(nn.Module):
    """Depthwise convolution along the frame axis followed by batch norm."""

    def __init__(self, channels: int, kernel: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(
            channels, channels, (kernel, 1), stride=(stride, 1),
            padding=(kernel // 2, 0), groups=channels,
        )
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return self.bn(self.conv(x))


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_joints: int = 12
    num_classes: int = 8
    channels: tuple[int, ...] = (16, 16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 9
    embed_dim: int = 64

    def __post_init__(self):
        if len(self.strides) != len(self.channels) - 1:
            raise ConfigurationError(
                f"{len(self.channels)} graph layers need {len(self.channels) - 1} "
                f"temporal strides, got {len(self.strides)}"
            )
        if self.temporal_kernel % 2 != 1:
            raise ConfigurationError("temporal_kernel must be odd")


class Encoder(nn.Module):
    """Stacked graph convolutions with depthwise temporal convolutions between them."""

    def __init__(self, in_channels: int, channels: Sequence[int], strides: Sequence[int],
                 temporal_kernel: int, graph: SkeletonGraph):
        super().__init__()
        a_norm = torch.as_tensor(graph.normalized(), dtype=torch.float32)
        self.gcn = nn.ModuleList()
        self.tcn = nn.ModuleList()
        prev = in_channels
        for i, out in enumerate(channels):
            if i > 0:
                self.tcn.append(TemporalConv(prev, temporal_kernel, strides[i - 1]))
            self.gcn.append(GraphConv(prev, out, a_norm))
            prev = out

    def forward(self, x):
        x = self.gcn[0](x)
        for tcn, gcn in zip(self.tcn, self.gcn[1:]):
            x = gcn(tcn(x))
        return x


class Outputs(NamedTuple):
    features: torch.Tensor           # X^(L), (B, C', T', V)
    logits: torch.Tensor             # main classifier, (B, N_c)
    joint_logits: torch.Tensor | None  # auxiliary head on the joint-constrained feature
    embedding: torch.Tensor          # unit-norm skeleton embedding, (B, d)


class Recognizer(nn.Module):
    """Encoder plus main classifier, joint-constrained auxiliary head and
    alignment projection.

    Parameters start uninitialized; call :meth:`initialize` (or load a
    checkpoint) before the first forward pass.
    """

    def __init__(self, config: ModelConfig, graph: SkeletonGraph, seed: int | None = None):
        super().__init__()
        if graph.num_joints != config.num_joints:
            raise ConfigurationError(
                f"graph has {graph.num_joints} joints, config expects {config.num_joints}"
            )
        self.config = config
        self.graph = graph
        c_out = config.channels[-1]
        self.encoder = Encoder(config.in_channels, config.channels, config.strides,
                               config.temporal_kernel, graph)
        self.classifier = nn.Linear(c_out, config.num_classes)
        self.joint_proj = nn.Linear(c_out, c_out)  # 1x1 channel convolution
        self.aux_classifier = nn.Linear(c_out * config.num_joints, config.num_classes)
        self.embed_proj = nn.Linear(c_out, config.embed_dim)
        for p in self.parameters():
            with torch.no_grad():
                p.zero_()  # placeholder until initialize() or a checkpoint load
        self._initialized = False
        if seed is not None:
            self.initialize(seed)

    @property
    def initialized(self) -> bool:
        return self._initialized

    def mark_initialized(self):
        self._initialized = True

    def initialize(self, seed: int):
        """Kaiming-uniform fan-in init for weights, zero biases."""
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if ".bn." in name:
                with torch.no_grad():
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
                continue
            if p.dim() == 2 and name.startswith("encoder"):
                fan_in = p.shape[0]  # graph weights are (C_in, C_out)
            else:
                fan_in = p[0].numel()
            _kaiming_uniform_(p, fan_in, gen)
        self._initialized = True
        return self

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if not self._initialized:
            raise StateError("model weights are uninitialized; call initialize() or load a checkpoint")
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or x.shape[3] != self.config.num_joints:
            raise ConfigurationError(
                f"expected (B, {self.config.in_channels}, T, {self.config.num_joints}) input, "
                f"got {tuple(x.shape)}"
            )
        return self.encoder(x)

    def forward(self, x: torch.Tensor, constraint: torch.Tensor | None = None) -> Outputs:
        from .selector import joint_constrained_feature, skeleton_embed

        feat = self.encode(x)
        logits = self.classifier(feat.mean(dim=(-2, -1)))
        joint_logits = None
        if constraint is not None:
            x_joint = joint_constrained_feature(feat, constraint, self.joint_proj)
            joint_logits = self.aux_classifier(x_joint)
        emb = skeleton_embed(feat, self.embed_proj)
        return Outputs(feat, logits, joint_logits, emb)

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.encode(x)
        return classify(feat, self.classifier.weight, self.classifier.bias)
