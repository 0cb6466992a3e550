"""Target-aware learning: the pairwise consistency loss over token affinity
maps, the sentence-cosine reweighting of multi-layer features, and the
prototype contrastive loss against positive / negative sentences.

Every function accepts leading batch dimensions and returns per-example
values; callers reduce over the batch.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from .rca import COS_EPS


def text_augment(fv: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
    """Per-token dot product with the sentence vector: [..., N_v, D], [..., D] -> [..., N_v, 1]."""
    if fv.shape[-1] != fs.shape[-1]:
        raise ValueError(f"feature width {fv.shape[-1]} != sentence width {fs.shape[-1]}")
    return fv @ fs.unsqueeze(-1)


def affinity(x: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of the Gram matrix divided by the squared Frobenius
    norm of ``x``. A zero matrix yields uniform rows."""
    if x.dim() == 1:
        x = x.unsqueeze(-1)
    gram = x @ x.transpose(-1, -2)
    sq = x.pow(2).sum(dim=(-2, -1), keepdim=True)
    # for x == 0 the Gram matrix is 0 as well; keep the quotient at 0
    scaled = torch.where(sq > 0, gram / torch.where(sq > 0, sq, torch.ones_like(sq)), torch.zeros_like(gram))
    return torch.softmax(scaled, dim=-1)


def cpcl_loss(per_layer_fv: Sequence[torch.Tensor], fs: torch.Tensor) -> torch.Tensor:
    """Sum over layers of ||(J - A_vis) * A_ta||_F^2 with the text-augmented
    affinity A_ta used as a fixed pseudo label (no gradient)."""
    if not per_layer_fv:
        raise ValueError("no layer features given to the consistency loss")
    total = 0.0
    for fv in per_layer_fv:
        cor_vis = affinity(fv)
        cor_ta = affinity(text_augment(fv, fs)).detach()
        total = total + ((1.0 - cor_vis) * cor_ta).pow(2).sum(dim=(-2, -1))
    return total


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting)."""
    den = (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)
    return (a * b).sum(-1) / den


def reweight_and_concat(per_layer_fv: Sequence[torch.Tensor], fs: torch.Tensor) -> torch.Tensor:
    """Scale every token by its cosine with the sentence vector and concatenate
    the layers along channels: -> [..., N_v, len(layers) * D]."""
    out = []
    for fv in per_layer_fv:
        if fv.shape[-1] != fs.shape[-1]:
            raise ValueError(f"feature width {fv.shape[-1]} != sentence width {fs.shape[-1]}")
        s = cosine(fv, fs.unsqueeze(-2))
        out.append(fv * s.unsqueeze(-1))
    return torch.cat(out, dim=-1)


def prototype(fvc: torch.Tensor, reduce: nn.Module) -> torch.Tensor:
    """Token average of the channel-reduced fused feature."""
    return reduce(fvc).mean(dim=-2)


def tccl_loss(proto: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
              neg_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy of the positive sentence among {positive, negatives}
    with cosine logits and unit temperature.

    proto, positive: [..., D]; negatives: [..., K, D] (K may be 0);
    neg_mask: optional bool [..., K] marking the real negatives.
    """
    s_pos = cosine(proto, positive)
    if negatives.shape[-2] == 0:
        return s_pos - s_pos
    s_neg = cosine(proto.unsqueeze(-2), negatives)
    if neg_mask is not None:
        s_neg = s_neg.masked_fill(~neg_mask, float("-inf"))
    logits = torch.cat([s_pos.unsqueeze(-1), s_neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - s_pos
