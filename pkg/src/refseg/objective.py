"""Segmentation head, text-to-pixel discriminative loss and the total objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import BinaryMask, LossWeights

LOGIT_CLAMP = 30.0


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of [B, C, h, w] maps to ``size``."""
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


@dataclass
class SegFeatures:
    """Per-pixel segmentation features and the paired sentence vector.

    The dense features are ``upsample(coarse) + pixel_hidden @ pixel_out``.
    They are kept in factored form: upsampling and the output map are linear,
    so logits are formed at the patch grid (upsampled as one channel) and at
    the narrow pixel width instead of on a [B, H, W, D] tensor.
    """

    coarse: torch.Tensor  # [B, N_v, D] decoder output on the patch grid
    pixel_hidden: torch.Tensor  # [B, H, W, P] per-pixel colour features
    pixel_out: torch.Tensor  # [P, D] linear map to the segmentation width
    text: torch.Tensor  # [B, D]

    @property
    def grid(self) -> int:
        g = int(round(self.coarse.shape[-2] ** 0.5))
        if g * g != self.coarse.shape[-2]:
            raise ValueError(f"{self.coarse.shape[-2]} tokens do not form a square grid")
        return g

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.pixel_hidden.shape[-3:-1])

    def _coarse_map(self) -> torch.Tensor:
        b, n, d = self.coarse.shape
        g = self.grid
        return self.coarse.transpose(1, 2).reshape(b, d, g, g)

    def dense(self) -> torch.Tensor:
        """Materialized f_seg as [B, H, W, D]."""
        up = upsample(self._coarse_map(), self.size).permute(0, 2, 3, 1)
        return up + self.pixel_hidden @ self.pixel_out

    def logits(self) -> torch.Tensor:
        """f_seg . f_t for every pixel: [B, H, W]."""
        coarse_logit = (self.coarse @ self.text.unsqueeze(-1)).squeeze(-1)
        b, g = coarse_logit.shape[0], self.grid
        up = upsample(coarse_logit.reshape(b, 1, g, g), self.size)[:, 0]
        pix_text = self.text @ self.pixel_out.T  # [B, P]
        return up + torch.einsum("bhwp,bp->bhw", self.pixel_hidden, pix_text)


class Decoder(nn.Module):
    """Transformer decoder: visual tokens are the queries, projected text
    tokens the memory. A per-pixel colour branch restores full-resolution
    boundaries after upsampling; ``pixel_dim=0`` turns it off."""

    def __init__(self, dim: int = 64, text_dim: int = 64, blocks: int = 2, heads: int = 2,
                 channels: int = 3, pixel_dim: int = 16):
        super().__init__()
        self.memory_proj = nn.Linear(text_dim, dim)
        self.layers = nn.ModuleList([
            nn.TransformerDecoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(blocks)
        ])
        self.norm = nn.LayerNorm(dim)
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", "Initializing zero-element tensors")
            self.pixel_in = nn.Linear(channels, pixel_dim)
            self.pixel_out = nn.Linear(pixel_dim, dim, bias=False)
        self.text_proj = nn.Linear(text_dim, dim)

    def forward(self, tokens: torch.Tensor, text_tokens: torch.Tensor, sentence: torch.Tensor,
                images: torch.Tensor, text_pad: Optional[torch.Tensor] = None) -> SegFeatures:
        """tokens [B, N_v, D]; text_tokens [B, L, D_t]; sentence [B, D_t];
        images [B, H, W, C]; text_pad [B, L] True at padding positions."""
        mem = self.memory_proj(text_tokens)
        x = tokens
        for layer in self.layers:
            x = layer(x, mem, memory_key_padding_mask=text_pad)
        x = self.norm(x)
        pixel = F.gelu(self.pixel_in(images.to(x.dtype)))
        return SegFeatures(coarse=x, pixel_hidden=pixel, pixel_out=self.pixel_out.weight.T,
                           text=self.text_proj(sentence))


def decode(decoder: Decoder, tokens, text_tokens, sentence, images, text_pad=None) -> SegFeatures:
    return decoder(tokens, text_tokens, sentence, images, text_pad)


def _logits_of(seg) -> torch.Tensor:
    return seg.logits() if isinstance(seg, SegFeatures) else seg


def dis_loss(seg, target) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy of sigmoid(f_seg . f_t) against the
    target partition (True = positive). Logits are clamped to +-30.

    ``seg`` is a SegFeatures or a logit tensor [..., H, W]; ``target`` a bool
    tensor or BinaryMask of the same spatial size. Returns one value per
    leading index."""
    logits = _logits_of(seg)
    if isinstance(target, BinaryMask):
        target = torch.from_numpy(target.bits.copy())
    target = torch.as_tensor(target, dtype=torch.bool, device=logits.device)
    if target.shape[-2:] != logits.shape[-2:]:
        raise ValueError(f"partition {tuple(target.shape)} does not cover logits {tuple(logits.shape)}")
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    per_pixel = torch.where(target, F.softplus(-z), F.softplus(z))
    return per_pixel.mean(dim=(-2, -1))


def total_loss(dis, cpcl, tccl, w: LossWeights):
    return dis + w.lambda_cpcl * cpcl + w.lambda_tccl * tccl


def predict_mask(seg, threshold: float = 0.5) -> torch.Tensor:
    """Bool tensor [..., H, W]: pixel is foreground iff sigmoid(logit) > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    return torch.sigmoid(_logits_of(seg)) > threshold


def predict_binary_mask(logits: torch.Tensor, threshold: float = 0.5) -> BinaryMask:
    return BinaryMask(predict_mask(logits, threshold).cpu().numpy())
