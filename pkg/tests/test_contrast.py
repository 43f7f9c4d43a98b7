import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cqil.contrast import OnlineNetwork, TargetNetwork, contrastive_term, ema_update, symmetrized_loss

from oracles import central_diff_grad, rel_err


def test_bounds_over_random_pairs():
    g = torch.Generator().manual_seed(0)
    q = torch.randn(1000, 16, generator=g, dtype=torch.float64)
    z = torch.randn(1000, 16, generator=g, dtype=torch.float64)
    terms = torch.stack([contrastive_term(q[i:i + 1], z[i:i + 1]) for i in range(1000)])
    assert bool((terms >= 0).all()) and bool((terms <= 4).all())


def test_reference_geometries():
    v = torch.tensor([[1.0, 2.0, -0.5]], dtype=torch.float64)
    assert abs(contrastive_term(v, 3 * v).item()) < 1e-9
    assert abs(contrastive_term(v, -v).item() - 4) < 1e-9
    o = torch.tensor([[2.0, -1.0, 0.0]], dtype=torch.float64)
    assert abs(contrastive_term(v, o).item() - 2) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 2 ** 16))
def test_scale_invariance(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    q, z = torch.randn(3, 5, generator=g, dtype=torch.float64), torch.randn(3, 5, generator=g, dtype=torch.float64)
    assert contrastive_term(a * q, b * z).item() == pytest.approx(contrastive_term(q, z).item(), abs=1e-9)


def test_errors():
    with pytest.raises(ValueError):
        contrastive_term(torch.zeros(1, 3), torch.ones(1, 3))
    with pytest.raises(ValueError):
        contrastive_term(torch.ones(1, 3), torch.ones(1, 4))


def test_gradient_and_stop_gradient():
    rng = np.random.default_rng(2)
    q0, z0 = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    q = torch.tensor(q0, requires_grad=True)
    z = torch.tensor(z0, requires_grad=True)
    contrastive_term(q, z).backward()
    num = central_diff_grad(lambda v: float(contrastive_term(torch.from_numpy(v), torch.from_numpy(z0))), q0)
    assert rel_err(q.grad.numpy(), num) < 1e-4
    assert z.grad is None


def test_ema_contraction():
    g = torch.Generator().manual_seed(4)
    theta = [torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(7, generator=g, dtype=torch.float64)]
    xi = [torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(7, generator=g, dtype=torch.float64)]
    tau = 0.9

    def dist():
        return math.sqrt(sum(float(((a - b) ** 2).sum()) for a, b in zip(xi, theta)))

    d0 = dist()
    for _ in range(5):
        ema_update(xi, theta, tau)
    assert abs(dist() - tau ** 5 * d0) < 1e-9


def test_ema_edges_and_errors():
    a, b = [torch.zeros(3)], [torch.ones(3)]
    ema_update(a, b, 1.0)
    assert not a[0].any()
    ema_update(a, b, 0.0)
    assert torch.equal(a[0], b[0])
    with pytest.raises(ValueError):
        ema_update([torch.zeros(3)], [torch.zeros(4)], 0.5)
    with pytest.raises(ValueError):
        ema_update(a, b, 1.5)


def test_target_network_receives_no_gradient():
    torch.manual_seed(0)
    online = OnlineNetwork(widths=(4, 8), hidden=8, proj_dim=4)
    target = TargetNetwork(online)
    enh, orig = torch.rand(3, 3, 8, 8), torch.rand(3, 3, 8, 8)
    loss = symmetrized_loss(enh, orig, online, target)
    loss.backward()
    assert all(p.grad is None for p in target.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in online.parameters())
    before = [p.clone() for p in target.parameters()]
    ema_update(target, online, 0.99)
    # online weights unchanged and target started as a copy
    assert all(torch.allclose(p, q, atol=1e-6) for p, q in zip(target.parameters(), before))


def test_symmetrized_loss_swaps_members():
    torch.manual_seed(1)
    online = OnlineNetwork(widths=(4, 8), hidden=8, proj_dim=4).eval()
    target = TargetNetwork(online).eval()
    a, b = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    assert symmetrized_loss(a, b, online, target).item() == pytest.approx(
        symmetrized_loss(b, a, online, target).item(), abs=1e-6)
    loss, ha, hb = symmetrized_loss(a, b, online, target, return_features=True)
    assert ha.shape == hb.shape == (2, 8)
    with pytest.raises(ValueError):
        symmetrized_loss(a, b[:1], online, target)
