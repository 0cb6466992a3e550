"""Frozen toy encoders standing in for the pretrained vision and text backbones.

All weights are drawn once from a seeded numpy generator and stored as
buffers, so they never appear among the trainable parameters and cannot be
touched by an optimizer. Layers are indexed from 1 to match the layer lists
used by the adapters (e.g. ``[1, 3, 5, 7, 9, 11]``).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import PAD_ID


def _gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def _layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps)


class FrozenModule(nn.Module):
    """Base class holding seeded, non-trainable weights as buffers."""

    def _put(self, name: str, array: np.ndarray) -> None:
        self.register_buffer(name, torch.from_numpy(np.ascontiguousarray(array, dtype=np.float64)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, buf in sorted(self.named_buffers()):
            h.update(name.encode())
            h.update(buf.detach().cpu().double().numpy().tobytes())
        return h.hexdigest()

    def fingerprint(self) -> str:
        """Checksum computed once per module and dtype; a cache key, not an
        integrity check (use ``checksum`` for that)."""
        dtype = next(self.buffers()).dtype
        cached = getattr(self, "_fingerprint", None)
        if cached is None or cached[0] != dtype:
            cached = (dtype, self.checksum())
            self._fingerprint = cached
        return cached[1]

    def n_frozen(self) -> int:
        return sum(b.numel() for b in self.buffers())


class VisionEncoder(FrozenModule):
    """Patch embedding followed by ``n_layers`` post-norm residual MLP blocks.

    ``layer(i, x)`` is a pure function of ``x`` and the frozen weights;
    every block ends with a layer norm so token norms stay near sqrt(D).
    """

    def __init__(self, seed: int = 42, dim: int = 64, n_layers: int = 12, patch: int = 8,
                 image_size: int = 64, channels: int = 3, hidden: int = 256):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.dim, self.n_layers, self.patch = dim, n_layers, patch
        self.image_size, self.channels, self.hidden = image_size, channels, hidden
        self.grid = image_size // patch
        self.n_tokens = self.grid * self.grid
        rng = np.random.default_rng(seed)
        fan_in = patch * patch * channels
        self._put("patch_w", rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, dim)))
        self._put("patch_b", rng.normal(0, 0.02, dim))
        self._put("pos", rng.normal(0, 1.0, (self.n_tokens, dim)))
        for i in range(1, n_layers + 1):
            self._put(f"w1_{i}", rng.normal(0, 1 / math.sqrt(dim), (dim, hidden)))
            self._put(f"b1_{i}", rng.normal(0, 0.02, hidden))
            self._put(f"w2_{i}", rng.normal(0, 0.5 / math.sqrt(hidden), (hidden, dim)))
            self._put(f"b2_{i}", rng.normal(0, 0.02, dim))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[..., H, W, C] -> [..., N_v, patch*patch*C] in row-major patch order."""
        *lead, h, w, c = images.shape
        if (h, w, c) != (self.image_size, self.image_size, self.channels):
            raise ValueError(f"expected images of {self.image_size}x{self.image_size}x{self.channels}, "
                             f"got {h}x{w}x{c}")
        p, g = self.patch, self.grid
        x = images.reshape(*lead, g, p, g, p, c)
        x = x.movedim(-4, -3)  # [..., g, g, p, p, c]
        return x.reshape(*lead, g * g, p * p * c)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patchify(images.to(self.patch_w.dtype))
        return x @ self.patch_w + self.patch_b + self.pos

    def layer(self, i: int, x: torch.Tensor) -> torch.Tensor:
        if not 1 <= i <= self.n_layers:
            raise IndexError(f"vision layer {i} out of range 1..{self.n_layers}")
        w1, b1 = getattr(self, f"w1_{i}"), getattr(self, f"b1_{i}")
        w2, b2 = getattr(self, f"w2_{i}"), getattr(self, f"b2_{i}")
        h = _gelu(_layer_norm(x) @ w1 + b1) @ w2 + b2
        return _layer_norm(x + h)

    def forward(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        """Plain frozen forward; returns the output of every layer (key 0 is
        the patch embedding)."""
        x = self.embed(images)
        feats = {0: x}
        for i in range(1, self.n_layers + 1):
            x = self.layer(i, x)
            feats[i] = x
        return feats


def vision_layer(encoder: VisionEncoder, i: int, x: torch.Tensor) -> torch.Tensor:
    return encoder.layer(i, x)


class TextEncoder(FrozenModule):
    """Token embedding plus ``n_layers`` pre-norm blocks of causal masked
    self-attention and a wide MLP.

    Position ids count only non-padding tokens and padding keys are masked, so
    where the padding sits never changes the content rows. The sentence
    feature is the output at the last non-padding position (the EOS token).
    """

    def __init__(self, seed: int = 43, dim: int = 64, n_layers: int = 4, length: int = 32,
                 vocab: int = 40, heads: int = 4, hidden: int = 4096):
        super().__init__()
        if dim % heads:
            raise ValueError("text dim must be divisible by heads")
        self.dim, self.n_layers, self.length, self.vocab, self.heads = dim, n_layers, length, vocab, heads
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self._put("tok", rng.normal(0, 1.0, (vocab, dim)))
        self._put("pos", rng.normal(0, 0.1, (length, dim)))
        s = 1 / math.sqrt(dim)
        for i in range(1, n_layers + 1):
            for name in ("wq", "wk", "wv", "wo"):
                self._put(f"{name}_{i}", rng.normal(0, s, (dim, dim)))
            self._put(f"w1_{i}", rng.normal(0, s, (dim, hidden)))
            self._put(f"b1_{i}", rng.normal(0, 0.02, hidden))
            self._put(f"w2_{i}", rng.normal(0, 0.5 / math.sqrt(hidden), (hidden, dim)))
            self._put(f"b2_{i}", rng.normal(0, 0.02, dim))

    def _attend(self, i: int, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.reshape(*lead, n, self.heads, hd).transpose(-2, -3)

        q = split(x @ getattr(self, f"wq_{i}"))
        k = split(x @ getattr(self, f"wk_{i}"))
        v = split(x @ getattr(self, f"wv_{i}"))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~allowed.unsqueeze(-3), float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return out.transpose(-2, -3).reshape(*lead, n, d) @ getattr(self, f"wo_{i}")

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """tokens [..., L] int -> (token features [..., L, D], sentence [..., D])."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.shape[-1] != self.length:
            raise ValueError(f"expected {self.length} tokens, got {tokens.shape[-1]}")
        if ((tokens < 0) | (tokens >= self.vocab)).any():
            raise ValueError("token id outside the vocabulary")
        real = tokens != PAD_ID
        if not real.any(dim=-1).all():
            raise ValueError("all-padding text")
        pos_ids = (real.long().cumsum(-1) - 1).clamp(min=0)
        x = self.tok[tokens] + self.pos[pos_ids]
        # query q may see key k iff k is real and comes no later than q
        order = pos_ids.unsqueeze(-1) >= pos_ids.unsqueeze(-2)
        allowed = order & real.unsqueeze(-2)
        # a padding query before the first real token would see nothing
        allowed = allowed | (~allowed.any(-1, keepdim=True) & real.unsqueeze(-2))
        for i in range(1, self.n_layers + 1):
            x = x + self._attend(i, _layer_norm(x), allowed)
            h = _gelu(_layer_norm(x) @ getattr(self, f"w1_{i}") + getattr(self, f"b1_{i}"))
            x = x + h @ getattr(self, f"w2_{i}") + getattr(self, f"b2_{i}")
        x = _layer_norm(x)
        last = self.length - 1 - real.flip(-1).long().argmax(-1)
        sentence = torch.take_along_dim(x, last[..., None, None], dim=-2).squeeze(-2)
        return x, sentence


def encode_text(encoder: TextEncoder, tokens) -> tuple[torch.Tensor, torch.Tensor]:
    return encoder(tokens)
