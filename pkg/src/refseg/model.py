"""The full network: frozen encoders, adapters, target-aware fusion and head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .config import TrainConfig
from .encoders import TextEncoder, VisionEncoder
from .objective import Decoder, SegFeatures
from .rca import RcaBlock, check_block_layers, forward_with_rca
from .tlm import reweight_and_concat


@dataclass
class ForwardOut:
    layers: dict[int, torch.Tensor]  # vision features per layer
    sentence: torch.Tensor  # projected positive sentence f_s [B, D]
    fused: torch.Tensor  # channel-reduced multi-layer feature [B, N_v, D]
    prototype: torch.Tensor  # [B, D]
    seg: SegFeatures


class RefSegModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.vision_seed, cfg.vision_dim, cfg.vision_layers, cfg.patch,
                                    cfg.image_size, hidden=cfg.vision_hidden)
        self.text = TextEncoder(cfg.text_seed, cfg.text_dim, cfg.text_layers, cfg.text_len,
                                cfg.vocab_size, hidden=cfg.text_hidden)
        # tunable parameters are initialised from the run seed, independent of the global RNG
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.rca = nn.ModuleList([
                RcaBlock(i, cfg.vision_dim, cfg.text_dim, cfg.text_len, cfg.rca_proj_dim,
                         cfg.rca_init_rescale, cfg.rca_variant)
                for i in cfg.active_rca_layers
            ])
            n = len(cfg.tlm_cpcl_layers)
            self.sentence_proj = nn.Linear(cfg.text_dim, cfg.vision_dim)
            self.reduce = nn.Linear(n * cfg.vision_dim, cfg.vision_dim)
            self.decoder = Decoder(cfg.vision_dim, cfg.text_dim, cfg.decoder_blocks, cfg.decoder_heads,
                                   pixel_dim=cfg.decoder_pixel_dim)
        check_block_layers(list(self.rca), cfg.vision_layers)

    # ---------------------------------------------------------------- frozen parts

    @property
    def start_layer(self) -> int:
        """Deepest layer whose output does not depend on any tunable parameter."""
        return self.rca[0].layer_index if len(self.rca) else self.vision.n_layers

    @torch.no_grad()
    def frozen_prefix(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        """Frozen features needed before the first adapter: the output of
        ``start_layer`` plus any consistency layer at or before it."""
        feats = self.vision(images) if self.start_layer == self.vision.n_layers else None
        if feats is None:
            x = self.vision.embed(images)
            feats = {0: x}
            for i in range(1, self.start_layer + 1):
                x = self.vision.layer(i, x)
                feats[i] = x
        keep = {self.start_layer} | {i for i in self.cfg.tlm_cpcl_layers if i <= self.start_layer}
        return {i: feats[i] for i in keep}

    @torch.no_grad()
    def encode_text(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.text(tokens)

    # ---------------------------------------------------------------- trainable parts

    def forward(self, prefix: dict[int, torch.Tensor], text_tokens: torch.Tensor, sentence: torch.Tensor,
                images: torch.Tensor, text_pad: Optional[torch.Tensor] = None) -> ForwardOut:
        """prefix: output of ``frozen_prefix``; text_tokens [B, L, D_t] and
        sentence [B, D_t] from the frozen text encoder; images [B, H, W, C]."""
        start = self.start_layer
        layers = dict(prefix)
        layers.update(forward_with_rca(self.vision, prefix[start], text_tokens, self.rca, start=start))
        fs = self.sentence_proj(sentence)
        fvc = reweight_and_concat([layers[i] for i in self.cfg.tlm_cpcl_layers], fs)
        fused = self.reduce(fvc)
        seg = self.decoder(fused, text_tokens, sentence, images, text_pad)
        return ForwardOut(layers, fs, fused, fused.mean(dim=-2), seg)

    def run(self, images: torch.Tensor, tokens: torch.Tensor) -> ForwardOut:
        """Convenience end-to-end forward from raw images and token ids."""
        text_tokens, sentence = self.encode_text(tokens)
        return self(self.frozen_prefix(images), text_tokens, sentence, images, tokens == 0)

    # ---------------------------------------------------------------- accounting

    def param_report(self) -> dict[str, int]:
        rca = sum(p.numel() for p in self.rca.parameters())
        tunable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {
            "frozen_vision": self.vision.n_frozen(),
            "frozen_text": self.text.n_frozen(),
            "frozen_total": self.vision.n_frozen() + self.text.n_frozen(),
            "tunable_backbone_adapters": rca,
            "tunable_other": tunable - rca,
            "tunable_total": tunable,
        }

    def frozen_checksums(self) -> dict[str, str]:
        return {"vision": self.vision.checksum(), "text": self.text.checksum()}
