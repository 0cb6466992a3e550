"""Rectified cost aggregation adapters inserted between frozen vision layers.

At an adapted layer ``i`` the visual tokens and the text tokens are projected
to a shared width, matched into a ReLU-rectified cosine cost volume
``[N_v, N_t]``, the cost volume is expanded to the vision width and used as a
multiplicative mask over the raw visual tokens, and the masked features are
added, scaled per channel, to the output of frozen layer ``i + 1``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import VisionEncoder

COS_EPS = 1e-8

# aggregation architectures; "add-rescaled" is the default
VARIANTS = ("compose", "compose-rescaled", "concat", "concat-rescaled", "add", "add-rescaled")


def parse_variant(name: str | int) -> str:
    """Accept a variant name, a setting number 1..6, or ``#1``..``#6``."""
    s = str(name).strip().lower().lstrip("#")
    if s.isdigit() and 1 <= int(s) <= len(VARIANTS):
        return VARIANTS[int(s) - 1]
    if s in VARIANTS:
        return s
    raise ValueError(f"unknown aggregation variant {name!r}; choose from {VARIANTS} or 1..6")


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Pairwise cosine similarity [..., Na, Nb]; the norm product is clamped
    below by ``eps`` so zero rows give 0."""
    num = a @ b.transpose(-1, -2)
    den = a.norm(dim=-1).unsqueeze(-1) * b.norm(dim=-1).unsqueeze(-2)
    return num / den.clamp_min(eps)


def cost_volume(fv: torch.Tensor, ft: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """ReLU of the cosine similarity between every visual and text token."""
    if fv.shape[-1] != ft.shape[-1]:
        raise ValueError(f"projected widths differ: {fv.shape[-1]} vs {ft.shape[-1]}")
    if torch.isnan(fv).any() or torch.isnan(ft).any():
        raise ValueError("NaN in cost-volume input")
    return F.relu(cosine_matrix(fv, ft, eps))


class RcaBlock(nn.Module):
    def __init__(self, layer_index: int, vision_dim: int, text_dim: int, text_len: int,
                 proj_dim: int = 16, init_rescale: float = 0.2, variant: str = "add-rescaled"):
        super().__init__()
        self.layer_index = int(layer_index)
        self.variant = parse_variant(variant)
        # per-token linear maps, i.e. 1x1 convolutions over the token axis
        self.vision_proj = nn.Linear(vision_dim, proj_dim)
        self.text_proj = nn.Linear(text_dim, proj_dim)
        self.expand = nn.Linear(text_len, vision_dim)
        self.rescale = nn.Parameter(torch.full((vision_dim,), float(init_rescale)))
        if self.variant.startswith("concat"):
            self.reduce = nn.Sequential(
                nn.Linear(2 * vision_dim, vision_dim), nn.GELU(), nn.Linear(vision_dim, vision_dim))
        else:
            self.reduce = None

    def cost(self, fv: torch.Tensor, ft: torch.Tensor) -> torch.Tensor:
        return cost_volume(self.vision_proj(fv), self.text_proj(ft))

    def fuse(self, fv: torch.Tensor, ft: torch.Tensor) -> torch.Tensor:
        """Text-referred visual feature: expand(cost) * raw visual tokens."""
        return apply_semantic_mask(self.cost(fv, ft), fv, self)


def apply_semantic_mask(c: torch.Tensor, fv_raw: torch.Tensor, block: RcaBlock) -> torch.Tensor:
    if c.shape[-1] != block.expand.in_features:
        raise ValueError(f"cost volume has {c.shape[-1]} text tokens, expand expects "
                         f"{block.expand.in_features}")
    if c.shape[-2] != fv_raw.shape[-2] or fv_raw.shape[-1] != block.expand.out_features:
        raise ValueError(f"shape mismatch: cost {tuple(c.shape)}, features {tuple(fv_raw.shape)}")
    return block.expand(c) * fv_raw


def residual_inject(fv_in: torch.Tensor, fvt: torch.Tensor, block: RcaBlock,
                    next_layer: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Aggregate the fused feature with the next frozen layer per ``block.variant``."""
    if block.rescale.shape[0] != fvt.shape[-1]:
        raise ValueError(f"rescale length {block.rescale.shape[0]} != channels {fvt.shape[-1]}")
    phi = block.rescale
    v = block.variant
    if v == "compose":
        return next_layer(fvt)
    if v == "compose-rescaled":
        return next_layer(fvt) * phi
    if v == "concat":
        return block.reduce(torch.cat([next_layer(fv_in), fvt], dim=-1))
    if v == "concat-rescaled":
        return block.reduce(torch.cat([next_layer(fv_in), fvt * phi], dim=-1))
    if v == "add":
        return next_layer(fv_in) + fvt
    return next_layer(fv_in) + fvt * phi


def check_block_layers(blocks: Sequence[RcaBlock], n_layers: int) -> None:
    idx = [b.layer_index for b in blocks]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate adapter layer index in {idx}")
    if idx != sorted(idx):
        raise ValueError(f"adapter layers must be strictly increasing, got {idx}")
    for i in idx:
        # the residual goes into layer i + 1, which must exist
        if not 1 <= i < n_layers:
            raise ValueError(f"adapter layer {i} outside 1..{n_layers - 1}")


def forward_with_rca(encoder: VisionEncoder, x: torch.Tensor, text_features: torch.Tensor,
                     blocks: Iterable[RcaBlock] = (), start: int = 0) -> dict[int, torch.Tensor]:
    """Run the frozen stack from the output of layer ``start`` (0 = patch
    embedding) to the last layer, applying each adapter after its layer.

    Returns ``{layer: features}`` for every layer from ``start`` on.
    """
    blocks = list(blocks)
    check_block_layers(blocks, encoder.n_layers)
    by_layer: Mapping[int, RcaBlock] = {b.layer_index: b for b in blocks}
    if blocks and blocks[0].layer_index < start:
        raise ValueError(f"adapter at layer {blocks[0].layer_index} precedes start layer {start}")
    feats = {start: x}
    for i in range(start, encoder.n_layers):
        nxt = lambda y, j=i + 1: encoder.layer(j, y)  # noqa: E731
        block = by_layer.get(i)
        if block is None:
            x = nxt(x)
        else:
            x = residual_inject(x, block.fuse(x, text_features), block, nxt)
        feats[i + 1] = x
    return feats
