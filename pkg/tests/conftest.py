import numpy as np
import pytest
import torch

from refseg.datamodel import BinaryMask

# verdict lines from test_acceptance, repeated in the summary so they show under capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_mask(rng, h, w, p=None):
    p = rng.uniform(0.1, 0.9) if p is None else p
    return BinaryMask(rng.random((h, w)) < p)


def central_fd(f, params, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each tensor
    in ``params`` (perturbed in place, float64)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + h
                fp = f().item()
                flat[k] = old - h
                fm = f().item()
                flat[k] = old
                gflat[k] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries of all tensors."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.detach().double(), n.detach().double()
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
