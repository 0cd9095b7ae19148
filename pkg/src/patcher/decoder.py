"""Mixture-of-experts decoder: expert projection, softmax gating, weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Module, PixelMLP
from .tensor import Tensor

N_EXPERTS = 4


@dataclass(frozen=True)
class DecoderConfig:
    D: int = 256
    mlp_hidden: tuple[int, ...] = (256, 256)
    gate_channels: tuple[int, ...] = (256, 256, 256, 4)

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(v) for v in self.mlp_hidden))
        object.__setattr__(self, "gate_channels", tuple(int(v) for v in self.gate_channels))
        if self.D <= 0 or any(v <= 0 for v in self.mlp_hidden + self.gate_channels):
            raise ValueError(f"decoder widths must be positive: {self}")
        if not self.gate_channels or self.gate_channels[-1] != N_EXPERTS:
            raise ValueError(f"gate must end with {N_EXPERTS} channels, got {self.gate_channels}")

    @classmethod
    def tiny(cls) -> "DecoderConfig":
        return cls(D=16, mlp_hidden=(16, 16), gate_channels=(16, 16, 16, 4))


@dataclass
class ExpertFeatures:
    experts: list[Tensor]   # F_i, each (B, D, h, w)
    weights: list[Tensor]   # W_i, each (B, 1, h, w)
    combined: Tensor        # O, (B, D, h, w)


class Gate(Module):
    """3x3 conv chain over the concatenated experts, softmax across experts per pixel."""

    def __init__(self, in_channels: int, channels: tuple[int, ...], rng: np.random.Generator):
        widths = (in_channels,) + tuple(channels)
        self.convs = [Conv2d(a, b, 3, rng, padding=1) for a, b in zip(widths[:-1], widths[1:])]

    def logits(self, experts: list[Tensor]) -> Tensor:
        h = F.concat(experts, axis=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return h

    def forward(self, experts: list[Tensor]) -> list[Tensor]:
        w = F.softmax(self.logits(experts), axis=1)
        return [w[:, i:i + 1] for i in range(w.shape[1])]


def combine(experts: list[Tensor], weights: list[Tensor]) -> Tensor:
    """O = sum_i W_i * F_i, each weight map broadcast over the channel axis."""
    if len(experts) != len(weights):
        raise ValueError(f"{len(experts)} experts but {len(weights)} weight maps")
    out = None
    for f, w in zip(experts, weights):
        term = w.expand(f.shape) * f
        out = term if out is None else out + term
    return out


class MoEDecoder(Module):
    def __init__(self, in_dims: tuple[int, ...], cfg: DecoderConfig, rng: np.random.Generator):
        if len(in_dims) != N_EXPERTS:
            raise ValueError(f"decoder expects {N_EXPERTS} encoder maps, got {len(in_dims)}")
        self.cfg = cfg
        self.experts = [PixelMLP([c, *cfg.mlp_hidden, cfg.D], rng) for c in in_dims]
        self.gate = Gate(N_EXPERTS * cfg.D, cfg.gate_channels, rng)
        self.head = PixelMLP([cfg.D, *cfg.mlp_hidden, 1], rng)

    def project(self, feats: list[Tensor]) -> list[Tensor]:
        h, w = feats[0].shape[-2:]
        return [F.bilinear_resize(mlp(e), h, w) for mlp, e in zip(self.experts, feats)]

    def forward(self, feats: list[Tensor], out_h: int, out_w: int) -> tuple[Tensor, ExpertFeatures]:
        """Logits at ``out_h`` x ``out_w`` plus the intermediate expert maps."""
        experts = self.project(feats)
        weights = self.gate(experts)
        combined = combine(experts, weights)
        logits = F.bilinear_resize(self.head(combined), out_h, out_w)
        return logits, ExpertFeatures(experts, weights, combined)
