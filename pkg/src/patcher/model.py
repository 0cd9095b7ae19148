"""Full encoder + MoE decoder network."""

from __future__ import annotations

import numpy as np

from .decoder import DecoderConfig, ExpertFeatures, MoEDecoder
from .encoder import Encoder, PatcherConfig
from .nn import Module
from .patching import pad_to_multiple, uncrop
from .tensor import Tensor, as_tensor


class Patcher(Module):
    def __init__(self, encoder_cfg: PatcherConfig | None = None, decoder_cfg: DecoderConfig | None = None,
                 seed: int = 0):
        self.encoder_cfg = encoder_cfg or PatcherConfig()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.encoder_cfg, rng)
        self.decoder = MoEDecoder(self.encoder_cfg.dims, self.decoder_cfg, rng)

    @classmethod
    def tiny(cls, in_channels: int = 1, seed: int = 0) -> "Patcher":
        return cls(PatcherConfig.tiny(in_channels), DecoderConfig.tiny(), seed)

    def forward_with_experts(self, image) -> tuple[Tensor, ExpertFeatures]:
        image = as_tensor(image)
        H, W = image.shape[-2:]
        x, _ = pad_to_multiple(image, self.encoder_cfg.total_stride)
        feats = self.encoder(x)
        logits, experts = self.decoder(feats, x.shape[-2], x.shape[-1])
        return uncrop(logits, H, W), experts

    def forward(self, image) -> Tensor:
        return self.forward_with_experts(image)[0]
