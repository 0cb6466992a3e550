import math

import pytest
import torch
from torch import nn

from refseg.tlm import affinity, cosine, cpcl_loss, prototype, reweight_and_concat, tccl_loss, text_augment

import oracles
from conftest import central_fd, max_rel_err


@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def g():
    return torch.Generator().manual_seed(7)


def test_text_augment_cases(g):
    fv = torch.randn(4, 3, generator=g)
    assert torch.equal(text_augment(fv, torch.zeros(3)), torch.zeros(4, 1))
    fs = torch.tensor([1.0, -2.0, 0.5])
    out = text_augment(fs.expand(4, 3), fs)
    assert torch.allclose(out, torch.full((4, 1), 5.25), atol=0)
    fs = torch.randn(3, generator=g)
    out = text_augment(fv, fs)
    for a in range(4):
        expect = sum(fv[a, d].item() * fs[d].item() for d in range(3))
        assert out[a, 0].item() == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        text_augment(fv, torch.zeros(4))


def test_affinity_cases(g):
    assert torch.equal(affinity(torch.randn(1, 3, generator=g)), torch.ones(1, 1))
    assert torch.allclose(affinity(torch.zeros(4, 2)), torch.full((4, 4), 0.25), atol=0)
    x = torch.randn(3, 5, generator=g)
    expect = torch.tensor(oracles.affinity_loop(x.tolist()))
    assert torch.allclose(affinity(x), expect, atol=1e-10, rtol=0)


def test_affinity_rows_are_distributions(g):
    for scale in (1e-6, 1.0, 1e3):
        a = affinity(scale * torch.randn(2, 6, 4, generator=g))
        assert (a >= 0).all()
        assert torch.allclose(a.sum(-1), torch.ones(2, 6), atol=1e-6)


def test_cpcl_single_token_is_zero(g):
    fv = [torch.randn(1, 4, generator=g) for _ in range(3)]
    assert cpcl_loss(fv, torch.randn(4, generator=g)).item() == 0.0


def test_cpcl_uniform_two_token_case():
    # zero features give uniform 2x2 maps on both branches
    fv = [torch.zeros(2, 3) for _ in range(3)]
    assert cpcl_loss(fv, torch.ones(3)).item() == pytest.approx(0.75, abs=1e-10)
    # the same closed form, per entry (1 - 0.5)^2 * 0.5^2 over 4 entries and 3 layers
    assert 3 * 4 * (1 - 0.5) ** 2 * 0.5 ** 2 == 0.75


def test_cpcl_nonnegative_and_needs_layers(g):
    for _ in range(20):
        fv = [torch.randn(4, 3, generator=g) for _ in range(3)]
        assert cpcl_loss(fv, torch.randn(3, generator=g)).item() >= 0
    with pytest.raises(ValueError):
        cpcl_loss([], torch.ones(3))


def _cpcl_stopped(fv_live, fv_frozen, fs):
    """The loss with the pseudo-label computed from separate, constant inputs."""
    total = 0.0
    for a, b in zip(fv_live, fv_frozen):
        total = total + ((1 - affinity(a)) * affinity(text_augment(b, fs))).pow(2).sum()
    return total


def test_cpcl_detach_contract(g):
    fv = [torch.randn(3, 4, generator=g, requires_grad=True) for _ in range(3)]
    fs = torch.randn(4, generator=g, requires_grad=True)
    cpcl_loss(fv, fs).backward()
    # no gradient path through the text-augmented branch at all
    assert fs.grad is None or torch.equal(fs.grad, torch.zeros(4))
    frozen = [f.detach().clone() for f in fv]
    fs_c = fs.detach().clone()
    numeric = central_fd(lambda: _cpcl_stopped(fv, frozen, fs_c), fv)
    assert max_rel_err([f.grad for f in fv], numeric) < 1e-4


def test_cpcl_gradient_matches_fd(g):
    fv = [torch.randn(4, 4, generator=g, requires_grad=True) for _ in range(3)]
    fs = torch.randn(4, generator=g)
    loss = cpcl_loss(fv, fs)
    analytic = torch.autograd.grad(loss, fv)
    frozen = [f.detach().clone() for f in fv]
    numeric = central_fd(lambda: _cpcl_stopped(fv, frozen, fs), fv)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_reweight_cases(g):
    fs = torch.tensor([1.0, 0.0, 0.0])
    orth = [torch.cat([torch.zeros(4, 1), torch.randn(4, 2, generator=g)], 1) for _ in range(3)]
    assert torch.equal(reweight_and_concat(orth, fs), torch.zeros(4, 9))
    par = [torch.rand(4, 1, generator=g) * fs for _ in range(3)]
    assert torch.allclose(reweight_and_concat(par, fs), torch.cat(par, -1), atol=1e-15)
    layers = [torch.randn(4, 3, generator=g) for _ in range(3)]
    fs = torch.randn(3, generator=g)
    out = reweight_and_concat(layers, fs)
    assert out.shape == (4, 9)
    for li, fv in enumerate(layers):
        for a in range(4):
            s = oracles.cosine_loop(fv[a].tolist(), fs.tolist())
            for d in range(3):
                assert out[a, 3 * li + d].item() == pytest.approx(s * fv[a, d].item(), abs=1e-10)
    with pytest.raises(ValueError):
        reweight_and_concat(layers, torch.ones(5))


def test_prototype_cases(g):
    reduce = nn.Linear(6, 2)
    tok = torch.randn(6, generator=g)
    assert torch.allclose(prototype(tok.expand(5, 6), reduce), reduce(tok), atol=1e-15)
    assert torch.allclose(prototype(tok[None], reduce), reduce(tok), atol=0)
    fvc = torch.randn(5, 6, generator=g)
    rows = [reduce(fvc[a]) for a in range(5)]
    mean = [sum(r[d].item() for r in rows) / 5 for d in range(2)]
    got = prototype(fvc, reduce)
    assert got[0].item() == pytest.approx(mean[0], abs=1e-12)
    assert got[1].item() == pytest.approx(mean[1], abs=1e-12)


def _unit(angle):
    return torch.tensor([math.cos(angle), math.sin(angle)])


def test_tccl_closed_forms():
    p = torch.tensor([1.0, 0.0])
    assert tccl_loss(p, p, torch.zeros(0, 2)).item() == 0.0
    neg = _unit(1.0)
    loss = tccl_loss(p, neg, neg[None]).item()
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    # s_pos = 1, s_neg = {0, -1}
    loss = tccl_loss(p, p, torch.stack([_unit(math.pi / 2), _unit(math.pi)])).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1) + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.4076, abs=1e-4)


def test_tccl_zero_vector_guarded():
    loss = tccl_loss(torch.zeros(2), torch.ones(2), torch.ones(1, 2))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_tccl_mask_equals_dropping_negatives(g):
    p, pos = torch.randn(3, generator=g), torch.randn(3, generator=g)
    negs = torch.randn(3, 3, generator=g)
    mask = torch.tensor([True, False, True])
    assert torch.allclose(tccl_loss(p, pos, negs, mask), tccl_loss(p, pos, negs[mask]), atol=1e-15)


def test_tccl_bounds(g):
    for k in (1, 2, 5):
        for _ in range(20):
            v = tccl_loss(torch.randn(4, generator=g), torch.randn(4, generator=g),
                          torch.randn(k, 4, generator=g)).item()
            assert math.log(1 + k * math.exp(-2)) - 1e-12 <= v <= math.log(1 + k * math.exp(2)) + 1e-12


def test_tccl_decreases_with_positive_score():
    p = torch.tensor([1.0, 0.0])
    negs = torch.stack([_unit(2.0), _unit(-1.0)])
    vals = [tccl_loss(p, _unit(a), negs).item() for a in torch.linspace(math.pi, 0, 25).tolist()]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_tccl_gradient_matches_fd(g):
    p = torch.randn(4, generator=g, requires_grad=True)
    pos = torch.randn(4, generator=g, requires_grad=True)
    negs = torch.randn(3, 4, generator=g, requires_grad=True)
    params = [p, pos, negs]
    analytic = torch.autograd.grad(tccl_loss(p, pos, negs), params)
    numeric = central_fd(lambda: tccl_loss(p, pos, negs), params)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_cosine_broadcasts():
    a = torch.randn(2, 5, 3)
    b = torch.randn(2, 1, 3)
    assert cosine(a, b).shape == (2, 5)
