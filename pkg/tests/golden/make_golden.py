"""Regenerate the frozen golden tensors. Run only on a deliberate format change."""

from pathlib import Path

import numpy as np
import torch

from refseg.encoders import TextEncoder, VisionEncoder
from refseg.objective import Decoder

HERE = Path(__file__).parent


def main():
    torch.manual_seed(0)
    ve = VisionEncoder(seed=42)
    eye = torch.eye(ve.n_tokens, ve.dim, dtype=torch.float64)
    layers = {f"layer{i}": ve.layer(i, eye).numpy() for i in (1, 12)}
    np.savez(HERE / "vision_seed42.npz", **layers)
    te = TextEncoder(seed=42)
    tokens = torch.zeros(te.length, dtype=torch.long)
    tokens[:2] = torch.tensor([5, 7])
    feats, sent = te(tokens)
    np.savez(HERE / "text_seed42.npz", tokens=feats.numpy(), sentence=sent.numpy())
    seg = tiny_decoder_output()
    np.savez(HERE / "decoder_seed42.npz", logits=seg.logits().detach().numpy(),
             coarse=seg.coarse.detach().numpy())


def tiny_decoder_output():
    """Seed-42 decoder (D = 8) on fixed seeded inputs, float64."""
    torch.manual_seed(42)
    dec = Decoder(dim=8, text_dim=8, blocks=2, heads=2, pixel_dim=4).double()
    g = torch.Generator().manual_seed(42)
    tokens = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
    text = torch.randn(1, 5, 8, generator=g, dtype=torch.float64)
    sentence = text[:, -1]
    images = torch.rand(1, 6, 6, 3, generator=g, dtype=torch.float64)
    with torch.no_grad():
        return dec(tokens, text, sentence, images)


if __name__ == "__main__":
    main()
