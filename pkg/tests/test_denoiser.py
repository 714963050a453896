import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latexblend import autodiff as ad
from latexblend.checks import SCHEDULE_ORACLE
from latexblend.denoiser import (ConditioningError, CrossAttention, Denoiser, add_noise, alpha_bar,
                                 denoise, diffusion_loss, schedule)
from latexblend.text import LatentTextualFeature


def tiny(seed=0, randomize_out=True):
    torch.manual_seed(seed)
    m = Denoiser(3, (8, 16), d_l=8, heads=2, T=100)
    if randomize_out:
        torch.nn.init.normal_(m.outc.weight, std=0.1)
    return m.eval()


def cond(b=2, m=16, d_l=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentTextualFeature(torch.randn(b, 4, m, d_l, generator=g), torch.randn(b, 4, m, d_l, generator=g))


def test_schedule_boundaries():
    a0, s0, w0 = schedule(0, 100)
    assert a0 == 1.0 and s0 == 0.0 and w0 == 1.0
    a, s, _ = schedule(99, 100)
    assert a < 0.02 and s > 0.999
    with pytest.raises(IndexError):
        schedule(100, 100)
    with pytest.raises(IndexError):
        schedule(-1, 100)


@pytest.mark.parametrize("t", sorted(SCHEDULE_ORACLE))
def test_schedule_matches_frozen_oracle(t):
    a, s, _ = schedule(t, 100)
    assert a == pytest.approx(SCHEDULE_ORACLE[t][0], abs=1e-12)
    assert s == pytest.approx(SCHEDULE_ORACLE[t][1], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 2000), st.data())
def test_variance_preserving(T, data):
    t = data.draw(st.integers(0, T - 1))
    a, s, _ = schedule(t, T)
    assert abs(a * a + s * s - 1) <= 1e-6


def test_alpha_bar_monotone():
    ab = [alpha_bar(t, 100) for t in range(100)]
    assert all(x > y for x, y in zip(ab, ab[1:]))


def test_add_noise_cases():
    g = torch.Generator().manual_seed(0)
    z0, eps = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    assert torch.equal(add_noise(z0, eps, 0, 100).z, z0)
    a, _, _ = schedule(40, 100)
    assert torch.equal(add_noise(z0, torch.zeros_like(z0), 40, 100).z, torch.tensor(a, dtype=torch.float32) * z0)
    t = torch.tensor([7, 63])
    zs = add_noise(z0, eps, t, 100)
    for i, ti in enumerate(t.tolist()):
        a, s, _ = schedule(ti, 100)
        np.testing.assert_allclose(zs.z[i].numpy(), a * z0[i].numpy() + s * eps[i].numpy(), atol=1e-6)
    with pytest.raises(ad.DimensionError):
        add_noise(z0, eps[:1], 3, 100)


def test_denoise_deterministic_and_shapes():
    m, h = tiny(), cond()
    zs = add_noise(torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32), 50, 100)
    with torch.no_grad():
        o1, o2 = denoise(m, zs, h, True), denoise(m, zs, h, True)
    assert torch.equal(o1.eps_hat, o2.eps_hat)
    assert o1.eps_hat.shape == zs.z.shape
    assert [tuple(a.shape) for a in o1.attn] == [(2, 16, 32, 32), (2, 16, 16, 16), (2, 16, 16, 16), (2, 16, 32, 32)]
    for a in o1.attn:
        assert a.min() >= 0
        np.testing.assert_allclose(a.sum(1).numpy(), 1.0, atol=1e-5)


def test_layer_count_mismatch():
    m = tiny()
    h = LatentTextualFeature(torch.zeros(1, 3, 16, 8), torch.zeros(1, 3, 16, 8))
    zs = add_noise(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 32), 1, 100)
    with pytest.raises(ConditioningError):
        denoise(m, zs, h)


def test_doubling_values_under_uniform_attention():
    torch.manual_seed(3)
    blk = CrossAttention(8, 8, 2)
    torch.nn.init.zeros_(blk.q.weight)  # scores all zero -> uniform attention
    x = torch.randn(1, 8, 4, 4)
    K, V = torch.randn(1, 5, 8), torch.randn(1, 5, 8)
    with torch.no_grad():
        y1, p = blk(x, K, V)
        y2, _ = blk(x, K, 2 * V)
        delta1 = y1 - x - blk.out.bias[None, :, None, None]
        delta2 = y2 - x - blk.out.bias[None, :, None, None]
        want = blk.out.weight @ V[0].mean(0)
    np.testing.assert_allclose(p.numpy(), 0.2, atol=1e-7)
    np.testing.assert_allclose(delta2.numpy(), 2 * delta1.numpy(), atol=1e-5)
    np.testing.assert_allclose(delta1[0, :, 0, 0].numpy(), want.numpy(), atol=1e-5)


def test_noun_rows_are_live():
    m, h = tiny(), cond(1)
    zs = add_noise(torch.randn(1, 3, 32, 32), torch.randn(1, 3, 32, 32), 50, 100)
    K2, V2 = h.K.clone(), h.V.clone()
    K2[:, :, 3] += 1.0
    V2[:, :, 3] += 1.0
    with torch.no_grad():
        a = denoise(m, zs, h).eps_hat
        b = denoise(m, zs, LatentTextualFeature(K2, V2)).eps_hat
    assert (a - b).norm() > 0


def test_loss_gradient_reaches_prompt_rows():
    m, h = tiny(), cond(1)
    K = h.K.clone().requires_grad_(True)
    V = h.V.clone().requires_grad_(True)
    loss = diffusion_loss(m, torch.randn(1, 3, 32, 32), LatentTextualFeature(K, V), t=torch.tensor([30]),
                          noise=torch.randn(1, 3, 32, 32))
    loss.backward()
    assert V.grad[0, :, 2].norm() > 0 and K.grad[0, :, 2].norm() > 0


class _Oracle(torch.nn.Module):
    """Returns a preset noise tensor whatever the input."""

    T, n_layers = 100, 4

    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, z, t, K, V, capture=False):
        from latexblend.denoiser import DenoiserOutput
        return DenoiserOutput(self.eps)


def test_loss_with_oracle_and_zero_denoisers():
    g = torch.Generator().manual_seed(9)
    z0, eps = torch.randn(64, 3, 32, 32, generator=g), torch.randn(64, 3, 32, 32, generator=g)
    h = cond(64, d_l=8)
    assert diffusion_loss(_Oracle(eps), z0, h, noise=eps, gen=g).item() == 0.0
    zero = diffusion_loss(_Oracle(torch.zeros_like(eps)), z0, h, noise=eps, gen=g).item()
    n = 3 * 32 * 32
    # sum of n unit normals per item, averaged over 64 items: std is sqrt(2n/64)
    assert abs(zero - n) <= 4 * math.sqrt(2 * n / 64)


def test_loss_matches_slow_reference():
    m, h = tiny(4), cond(3)
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(3, 3, 32, 32, generator=g)
    t = torch.tensor([5, 50, 95])
    eps = torch.randn(3, 3, 32, 32, generator=g)
    with torch.no_grad():
        got = diffusion_loss(m, z0, h, t=t, noise=eps).item()
        total = 0.0
        for i in range(3):
            a, s, w = schedule(int(t[i]), 100)
            zt = (torch.tensor(a) * z0[i:i + 1] + torch.tensor(s) * eps[i:i + 1]).float()
            e_hat = m(zt, t[i:i + 1], h.K[i:i + 1], h.V[i:i + 1]).eps_hat
            total += w * float(((eps[i:i + 1].double() - e_hat.double()) ** 2).sum())
    assert got == pytest.approx(total / 3, rel=1e-5)


def test_empty_batch_rejected():
    with pytest.raises(ad.ContractError):
        diffusion_loss(tiny(), torch.zeros(0, 3, 32, 32), cond(0))
