"""Token embedding and the pre-norm Transformer stack run inside each large patch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module
from .patching import GeometryError
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    n_blocks: int
    heads: int
    reduction: int
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.reduction <= 0 or self.n_blocks < 0 or self.ffn_expansion <= 0:
            raise ValueError(f"invalid stage config {self}")


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, d, M, M) -> (B, M*M, d), row-major over the grid."""
    B, d, Mh, Mw = x.shape
    return x.reshape(B, d, Mh * Mw).transpose(0, 2, 1)


def tokens_to_map(x: Tensor) -> Tensor:
    """(B, M*M, d) -> (B, d, M, M); inverse of :func:`map_to_tokens`."""
    B, N, d = x.shape
    M = math.isqrt(N)
    if M * M != N:
        raise GeometryError(f"token count {N} is not a perfect square")
    return x.transpose(0, 2, 1).reshape(B, d, M, M)


class PatchEmbed(Module):
    """Flatten each non-overlapping SxS block (channel-major) and project it to one token."""

    def __init__(self, in_channels: int, small: int, embed_dim: int, rng: np.random.Generator):
        self.small = small
        self.proj = Linear(in_channels * small * small, embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        S = self.small
        if H % S or W % S:
            raise GeometryError(f"patch side {H}x{W} not divisible by S={S}")
        Mh, Mw = H // S, W // S
        blocks = x.reshape(B, C, Mh, S, Mw, S).transpose(0, 2, 4, 1, 3, 5)
        return self.proj(blocks.reshape(B, Mh * Mw, C * S * S))


class EfficientSelfAttention(Module):
    """Multi-head attention whose keys/values come from an r-times reduced token grid."""

    def __init__(self, dim: int, heads: int, reduction: int, rng: np.random.Generator):
        self.heads = heads
        self.reduction = reduction
        self.query = Linear(dim, dim, rng)
        # a key bias shifts every score in a softmax row equally, so it is omitted
        self.key = Linear(dim, dim, rng, bias=False)
        self.value = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        if reduction > 1:
            self.sr = Conv2d(dim, dim, reduction, rng, stride=reduction)
            self.sr_norm = LayerNorm(dim)
        self.last_attention: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        B, N, d = t.shape
        return t.reshape(B, N, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, keep_attention: bool = False) -> Tensor:
        B, N, d = x.shape
        M = math.isqrt(N)
        if M * M != N:
            raise GeometryError(f"token count {N} is not a perfect square")
        r = self.reduction
        if M % r:
            raise ValueError(f"reduction ratio {r} does not divide token grid side {M}")
        ctx = x
        if r > 1:
            ctx = self.sr_norm(map_to_tokens(self.sr(tokens_to_map(x))))
        q = self._split(self.query(x))
        k = self._split(self.key(ctx))
        v = self._split(self.value(ctx))
        scale = 1.0 / math.sqrt(d // self.heads)
        attn = F.softmax(F.matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        if keep_attention:
            self.last_attention = attn.data
        out = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, N, d)
        return self.proj(out)


class MixFFN(Module):
    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        hidden = dim * expansion
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = map_to_tokens(self.dwconv(tokens_to_map(h)))
        return self.fc2(F.gelu(h))


class ViTBlock(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = EfficientSelfAttention(cfg.embed_dim, cfg.heads, cfg.reduction, rng)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.ffn = MixFFN(cfg.embed_dim, cfg.ffn_expansion, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class TransformerStack(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        self.blocks = [ViTBlock(cfg, rng) for _ in range(cfg.n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x
