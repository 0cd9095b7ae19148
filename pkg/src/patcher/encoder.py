"""Patcher blocks and the four-stage encoder cascade."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Module
from .patching import GeometryError, PatchSpec, pad_to_multiple, partition, reassemble, uncrop
from .tensor import Tensor
from .transformer import PatchEmbed, StageConfig, TransformerStack, tokens_to_map

N_STAGES = 4


@dataclass(frozen=True)
class PatcherConfig:
    in_channels: int = 3
    large: tuple[int, ...] = (32, 32, 32, 32)
    context: tuple[int, ...] = (8, 8, 8, 8)
    small: tuple[int, ...] = (2, 2, 2, 2)
    dims: tuple[int, ...] = (64, 128, 320, 512)
    depths: tuple[int, ...] = (3, 6, 40, 3)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    reductions: tuple[int, ...] = (8, 4, 2, 1)
    ffn_expansion: int = 4

    def __post_init__(self):
        for name in ("large", "context", "small", "dims", "depths", "heads", "reductions"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != N_STAGES:
                raise ValueError(f"{name} needs {N_STAGES} entries, got {len(value)}")
            object.__setattr__(self, name, value)
        if self.in_channels <= 0:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        for i in range(N_STAGES):
            spec = self.patch_spec(i)
            stage = self.stage(i)
            if spec.M % stage.reduction:
                raise ValueError(f"stage {i}: reduction {stage.reduction} does not divide token grid "
                                 f"side M={spec.M} (L={spec.L}, P={spec.P}, S={spec.S})")

    def patch_spec(self, i: int) -> PatchSpec:
        return PatchSpec(self.large[i], self.context[i], self.small[i])

    def stage(self, i: int) -> StageConfig:
        return StageConfig(self.dims[i], self.depths[i], self.heads[i], self.reductions[i],
                           self.ffn_expansion)

    def stage_in_channels(self, i: int) -> int:
        return self.in_channels if i == 0 else self.dims[i - 1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.small))

    @classmethod
    def tiny(cls, in_channels: int = 1, **overrides) -> "PatcherConfig":
        base = dict(in_channels=in_channels, large=(8,) * 4, context=(2,) * 4, small=(2,) * 4,
                    dims=(8, 16, 16, 32), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4),
                    reductions=(2, 2, 1, 1))
        base.update(overrides)
        return cls(**base)


def stage_shapes(cfg: PatcherConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    """Analytic (channels, h, w) of every encoder output for an input of the given size."""
    stride = cfg.total_stride
    h, w = -(-height // stride) * stride, -(-width // stride) * stride
    shapes = []
    for i in range(N_STAGES):
        h, w = h // cfg.small[i], w // cfg.small[i]
        shapes.append((cfg.dims[i], h, w))
    return shapes


class PatcherBlock(Module):
    """partition -> embed -> Transformer stack -> token map -> centre crop + reassembly."""

    def __init__(self, in_channels: int, spec: PatchSpec, stage: StageConfig, rng: np.random.Generator):
        self.spec = spec
        self.stage = stage
        self.embed = PatchEmbed(in_channels, spec.S, stage.embed_dim, rng)
        self.transformer = TransformerStack(stage, rng)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        S = self.spec.S
        if H % S or W % S:
            raise GeometryError(f"block input {H}x{W} not divisible by S={S}")
        # inputs smaller than L (or not a multiple of it) get zero padding
        xp, _ = pad_to_multiple(x, self.spec.L)
        stacked, grid = partition(xp, self.spec)
        tokens = self.transformer(self.embed(stacked))
        out = reassemble(tokens_to_map(tokens), grid)
        return uncrop(out, H // S, W // S)


class Encoder(Module):
    def __init__(self, cfg: PatcherConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [PatcherBlock(cfg.stage_in_channels(i), cfg.patch_spec(i), cfg.stage(i), rng)
                       for i in range(N_STAGES)]

    def forward(self, image: Tensor) -> list[Tensor]:
        B, C, H, W = image.shape
        if C != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {C}")
        stride = self.cfg.total_stride
        if H < self.cfg.small[0] or W < self.cfg.small[0]:
            raise GeometryError(f"input {H}x{W} is smaller than one small patch")
        x, _ = pad_to_multiple(image, stride)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats
