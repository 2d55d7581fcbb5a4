import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from seismollm.data import ConfigError
from seismollm.losses import bce_loss, ce_loss, huber_loss, picking_loss
from seismollm.model import ShapeError


def fd_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def analytic(f, x):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    return x.grad


def test_bce_cases():
    assert float(bce_loss([1.0, 0.0, 1.0], [1.0, 0.0, 1.0])) < 1e-6
    assert float(bce_loss([0.5], [0.5])) == pytest.approx(math.log(2))
    x = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    bce_loss(x, torch.tensor([1.0], dtype=torch.float64)).backward()
    assert float(x.grad) == pytest.approx(-2.0, abs=1e-5)
    with pytest.raises(ShapeError):
        bce_loss([0.5, 0.5], [1.0])


def test_picking_loss_composition():
    rng = np.random.default_rng(0)
    p, s = rng.uniform(0.01, 0.99, (2, 100))
    lp, ls = rng.uniform(0, 1, (2, 100))
    total = float(picking_loss(p, s, lp, ls))
    assert total == pytest.approx(float(bce_loss(p, lp)) + float(bce_loss(s, ls)), abs=1e-12)
    assert total == pytest.approx(float(picking_loss(s, p, ls, lp)), abs=1e-12)
    assert float(picking_loss(lp.round(), ls.round(), lp.round(), ls.round())) < 1e-5
    with pytest.raises(ShapeError):
        picking_loss(p, s[:-1], lp, ls)


def test_ce_cases():
    assert float(ce_loss([1.0, 0.0], [1.0, 0.0])) < 1e-6
    assert float(ce_loss([0.5, 0.5], [0.0, 1.0])) == pytest.approx(math.log(2))
    assert float(ce_loss([0.9, 0.1], [0.0, 1.0])) == pytest.approx(-math.log(0.1))
    with pytest.raises(ValueError, match="sum to 1"):
        ce_loss([0.7, 0.7], [1.0, 0.0])
    batch = ce_loss([[0.5, 0.5], [0.9, 0.1]], [[1.0, 0.0], [0.0, 1.0]])
    assert float(batch) == pytest.approx((math.log(2) - math.log(0.1)) / 2)


def test_huber_cases():
    assert float(huber_loss([1.0, 2.0], [1.0, 2.0])) == 0.0
    assert float(huber_loss([0.5], [0.0])) == pytest.approx(0.125)
    assert float(huber_loss([2.0], [0.0])) == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        huber_loss([1.0], [0.0], delta=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.99, 0.99), min_size=1, max_size=20), st.floats(0.1, 3.0))
def test_huber_quadratic_region(r, delta):
    r = np.asarray(r) * delta
    assert float(huber_loss(r, np.zeros_like(r), delta)) == pytest.approx(0.5 * np.mean(r**2), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1.0, 50.0), min_size=1, max_size=20), st.floats(0.1, 3.0))
def test_huber_linear_region(mags, delta):
    r = np.asarray(mags) * delta * np.where(np.arange(len(mags)) % 2, 1, -1)
    expected = delta * (np.mean(np.abs(r)) - 0.5 * delta)
    assert float(huber_loss(r, np.zeros_like(r), delta)) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_huber_continuous_at_delta():
    eps = 1e-9
    left = float(huber_loss([1.0 - eps], [0.0]))
    right = float(huber_loss([1.0 + eps], [0.0]))
    assert abs(left - right) < 1e-8


def test_losses_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(1)
    y = (rng.uniform(size=50) > 0.5).astype(float)
    assert float(bce_loss(y, y)) < 1e-6
    assert float(bce_loss(np.clip(y + 0.3 * (1 - 2 * y), 0, 1), y)) > 0.1
    t = rng.normal(size=20)
    assert float(huber_loss(t, t)) == 0.0 and float(huber_loss(t + 0.1, t)) > 0


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(20, generator=g, dtype=torch.float64) * 0.9 + 0.05
    label = torch.rand(20, generator=g, dtype=torch.float64)
    f = lambda x: bce_loss(x, label)
    assert torch.allclose(analytic(f, pred), fd_grad(f, pred.clone()), rtol=1e-4, atol=1e-9)

    logits = torch.randn(6, 2, generator=g, dtype=torch.float64)
    onehot = torch.nn.functional.one_hot(torch.randint(0, 2, (6,), generator=g), 2).double()
    f = lambda z: ce_loss(torch.softmax(z, -1), onehot)
    assert torch.allclose(analytic(f, logits), fd_grad(f, logits.clone()), rtol=1e-4, atol=1e-9)

    x = torch.randn(20, generator=g, dtype=torch.float64) * 2
    x = x + torch.sign(x) * 0.01 * ((x.abs() - 1).abs() < 0.01)  # keep clear of the kink
    truth = torch.zeros(20, dtype=torch.float64)
    f = lambda v: huber_loss(v, truth)
    assert torch.allclose(analytic(f, x), fd_grad(f, x.clone()), rtol=1e-4, atol=1e-9)
