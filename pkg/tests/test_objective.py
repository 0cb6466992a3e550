import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from refseg.datamodel import BinaryMask, LossWeights
from refseg.objective import (
    Decoder, SegFeatures, dis_loss, predict_binary_mask, predict_mask, total_loss, upsample,
)

import oracles
from conftest import central_fd, max_rel_err

GOLDEN = Path(__file__).parent / "golden"
sys.path.insert(0, str(GOLDEN))
from make_golden import tiny_decoder_output  # noqa: E402


def test_dis_loss_zero_logits_is_ln2():
    for bits in ([[1, 0], [0, 1]], [[0, 0], [0, 0]], [[1, 1], [1, 1]]):
        v = dis_loss(torch.zeros(2, 2, dtype=torch.float64), torch.tensor(bits, dtype=torch.bool))
        assert abs(v.item() - math.log(2)) <= 1e-12


def test_dis_loss_saturated():
    target = torch.tensor([[True, False], [False, True]])
    logits = torch.where(target, 30.0, -30.0).double()
    assert dis_loss(logits, target).item() < 1e-12
    # clamping keeps extreme wrong logits finite
    assert math.isfinite(dis_loss(-1e6 * logits, target).item())


def test_dis_loss_two_by_two_example():
    logits = torch.tensor([[1.0, -1.0], [0.0, 2.0]], dtype=torch.float64)
    target = BinaryMask(np.array([[1, 0], [0, 1]], bool))
    terms = [oracles.softplus(-1), oracles.softplus(-1), math.log(2), oracles.softplus(-2)]
    expect = sum(terms) / 4
    assert dis_loss(logits, target).item() == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.3617, abs=1e-4)


def test_dis_loss_shape_check_and_batching():
    with pytest.raises(ValueError):
        dis_loss(torch.zeros(2, 2), torch.zeros(3, 3, dtype=torch.bool))
    out = dis_loss(torch.zeros(5, 3, 3), torch.zeros(5, 3, 3, dtype=torch.bool))
    assert out.shape == (5,)


def test_dis_loss_nonnegative():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        logits = 10 * torch.randn(4, 4, generator=g)
        assert dis_loss(logits, torch.rand(4, 4, generator=g) > 0.5).item() >= 0


def test_dis_loss_gradient_matches_fd():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    target = torch.tensor([[True, False], [False, True]])
    (analytic,) = torch.autograd.grad(dis_loss(logits, target), [logits])
    numeric = central_fd(lambda: dis_loss(logits, target), [logits])
    assert max_rel_err([analytic], numeric) < 1e-4


def test_total_loss():
    assert total_loss(0.7, 5.0, 9.0, LossWeights(0.0, 0.0)) == 0.7
    assert total_loss(0.5, 0.3, 0.2, LossWeights(1.0, 2.0)) == pytest.approx(1.2, abs=1e-15)
    assert LossWeights() == LossWeights(0.1, 0.1)
    # linear in each component
    for w in (LossWeights(0.0, 0.1), LossWeights(0.1, 0.1), LossWeights(2.0, 0.5)):
        base = total_loss(1.0, 1.0, 1.0, w)
        assert total_loss(1.0, 2.0, 1.0, w) - base == pytest.approx(w.lambda_cpcl)
        assert total_loss(1.0, 1.0, 2.0, w) - base == pytest.approx(w.lambda_tccl)


def test_predict_mask_cases():
    assert not predict_mask(torch.zeros(3, 3)).any()
    assert predict_mask(torch.full((3, 3), 30.0)).all()
    with pytest.raises(ValueError):
        predict_mask(torch.zeros(2, 2), 1.0)
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(5, 6, generator=g, dtype=torch.float64)
    got = predict_binary_mask(logits, 0.3)
    for y in range(5):
        for x in range(6):
            assert got.bits[y, x] == (1 / (1 + math.exp(-logits[y, x].item())) > 0.3)


def test_predict_mask_monotone_in_threshold():
    logits = torch.randn(8, 8)
    prev = predict_mask(logits, 0.01)
    for t in np.linspace(0.05, 0.99, 20):
        cur = predict_mask(logits, float(t))
        assert not (cur & ~prev).any()
        prev = cur


def _seg(g, b=2, n=4, h=6, p=3, d=5):
    return SegFeatures(coarse=torch.randn(b, n, d, generator=g, dtype=torch.float64),
                       pixel_hidden=torch.randn(b, h, h, p, generator=g, dtype=torch.float64),
                       pixel_out=torch.randn(p, d, generator=g, dtype=torch.float64),
                       text=torch.randn(b, d, generator=g, dtype=torch.float64))


def test_factored_logits_match_dense_features():
    seg = _seg(torch.Generator().manual_seed(3))
    dense = seg.dense()
    assert dense.shape == (2, 6, 6, 5)
    direct = (dense * seg.text[:, None, None, :]).sum(-1)
    assert torch.allclose(seg.logits(), direct, atol=1e-12)


def test_segfeatures_rejects_non_square_grid():
    seg = _seg(torch.Generator().manual_seed(3), n=5)
    with pytest.raises(ValueError):
        seg.logits()


def test_upsample_constant_map():
    x = torch.full((1, 1, 2, 2), 3.0)
    assert torch.allclose(upsample(x, (8, 8)), torch.full((1, 1, 8, 8), 3.0))


def test_decoder_shapes_and_determinism():
    torch.manual_seed(0)
    dec = Decoder(dim=8, text_dim=6, blocks=2, heads=2).double()
    tokens = torch.randn(3, 16, 8, dtype=torch.float64)
    text = torch.randn(3, 7, 6, dtype=torch.float64)
    images = torch.rand(3, 12, 12, 3, dtype=torch.float64)
    pad = torch.zeros(3, 7, dtype=torch.bool)
    pad[:, 5:] = True
    a = dec(tokens, text, text[:, 4], images, pad).logits()
    b = dec(tokens, text, text[:, 4], images, pad).logits()
    assert a.shape == (3, 12, 12)
    assert torch.equal(a, b)


def test_decoder_without_pixel_branch_is_upsampled_coarse():
    torch.manual_seed(0)
    dec = Decoder(dim=8, text_dim=6, blocks=1, heads=2, pixel_dim=0).double()
    tokens = torch.randn(2, 16, 8, dtype=torch.float64)
    text = torch.randn(2, 5, 6, dtype=torch.float64)
    seg = dec(tokens, text, text[:, -1], torch.rand(2, 12, 12, 3, dtype=torch.float64))
    coarse = (seg.coarse @ seg.text.unsqueeze(-1)).reshape(2, 1, 4, 4)
    assert torch.equal(seg.logits(), upsample(coarse, (12, 12))[:, 0])


def test_decoder_padding_memory_ignored():
    torch.manual_seed(0)
    dec = Decoder(dim=8, text_dim=6).double()
    tokens = torch.randn(1, 4, 8, dtype=torch.float64)
    text = torch.randn(1, 5, 6, dtype=torch.float64)
    pad = torch.tensor([[False, False, False, True, True]])
    images = torch.rand(1, 4, 4, 3, dtype=torch.float64)
    other = text.clone()
    other[:, 3:] = 100.0
    a = dec(tokens, text, text[:, 2], images, pad).logits()
    b = dec(tokens, other, text[:, 2], images, pad).logits()
    assert torch.allclose(a, b, atol=1e-12)


def test_decoder_golden():
    gold = np.load(GOLDEN / "decoder_seed42.npz")
    seg = tiny_decoder_output()
    np.testing.assert_allclose(seg.logits().detach().numpy(), gold["logits"], rtol=0, atol=1e-10)
    np.testing.assert_allclose(seg.coarse.detach().numpy(), gold["coarse"], rtol=0, atol=1e-10)
