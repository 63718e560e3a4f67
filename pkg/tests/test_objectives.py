import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from motlab.objectives import (
    build_cosine_schedule,
    cfg_combine,
    combined_loss,
    ddpm_loss,
    forward_noise,
    respace,
    reverse_step,
    timestep_embedding,
)


def test_cosine_midpoint_and_endpoints():
    s = build_cosine_schedule(1000)
    assert abs(s.ab(500) - 0.5) <= 0.05
    assert s.ab(1) > 0.999 and s.ab(1000) < 1e-3
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.alpha >= 0.001) and np.all(s.alpha < 1)


@pytest.mark.parametrize("T", [10, 50, 1000])
def test_alpha_bar_is_product(T):
    s = build_cosine_schedule(T)
    for t in range(1, T + 1):
        assert abs(s.ab(t) - float(np.prod(s.alpha[:t]))) <= 1e-12


def test_unclipped_region_matches_closed_form():
    T, off = 1000, 0.008
    s = build_cosine_schedule(T, off)
    f = lambda t: math.cos(((t / T + off) / (1 + off)) * math.pi / 2) ** 2
    for t in (1, 100, 500, 900):
        assert abs(s.ab(t) - f(t) / f(0)) < 1e-12


def test_respace_keeps_endpoint_and_alpha_bar():
    s = build_cosine_schedule(1000)
    r = respace(s, 50)
    assert r.T == 50 and r.timesteps[-1] == 1000
    np.testing.assert_array_equal(r.alpha_bar, s.alpha_bar[r.timesteps - 1])
    np.testing.assert_allclose(np.cumprod(r.alpha), r.alpha_bar, rtol=1e-12)


def test_forward_noise_examples():
    s = build_cosine_schedule(1000)
    x0, eps = torch.tensor([1.0, -2.0]), torch.tensor([0.5, 0.5])
    got = forward_noise(x0, 500, eps, s)
    ab = s.ab(500)
    assert torch.allclose(got, math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, atol=0, rtol=1e-15)
    assert torch.equal(forward_noise(x0, 7, torch.zeros(2), s), math.sqrt(s.ab(7)) * x0)


@given(st.integers(2, 50), st.integers(0, 10 ** 6))
def test_reverse_step_inverts_with_true_noise(t, seed):
    s = build_cosine_schedule(50, sigma_mode="zero")
    g = torch.Generator().manual_seed(seed)
    x0, eps = torch.randn(4, generator=g), torch.randn(4, generator=g)
    x_t = forward_noise(x0, t, eps, s)
    # posterior mean given the true x0
    ab, abp, a = s.ab(t), s.ab_prev(t), float(s.alpha[t - 1])
    mu = (math.sqrt(abp) * (1 - a) / (1 - ab)) * x0 + (math.sqrt(a) * (1 - abp) / (1 - ab)) * x_t
    got = reverse_step(x_t, t, eps, torch.zeros(4), s)
    assert (got - mu).abs().max() < 1e-10


def _oracle_chain(sched, x0, g, noise=True):
    x = torch.randn(x0.shape, generator=g)
    dist = []
    for t in range(sched.T, 0, -1):
        ab = sched.ab(t)
        eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        z = torch.randn(x0.shape, generator=g) if noise else torch.zeros_like(x0)
        x = reverse_step(x, t, eps, z, sched)
        dist.append(float((x - x0).norm()))
    return x, dist


@pytest.mark.parametrize("sigma_mode", ["ddpm_beta", "zero"])
def test_oracle_denoiser_recovers_x0(sigma_mode):
    s = build_cosine_schedule(50, sigma_mode=sigma_mode)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(16, generator=g)
    x, _ = _oracle_chain(s, x0, g)
    assert (x - x0).abs().max() < 1e-3


def test_oracle_chain_contracts():
    s = build_cosine_schedule(50, sigma_mode="zero")
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(16, generator=g)
    _, dist = _oracle_chain(s, x0, g, noise=False)
    tail = dist[int(0.2 * len(dist)):]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


def test_ddpm_loss_examples():
    assert float(ddpm_loss(torch.zeros(2, 3), torch.ones(2, 3))) == 1.0
    assert float(ddpm_loss(torch.tensor([1.0, 3.0]), torch.tensor([1.0, 1.0]))) == 2.0
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ddpm_loss(torch.zeros(2), torch.zeros(3))


def test_combined_loss_examples():
    assert float(combined_loss(torch.tensor([2.0]), torch.tensor([0.1]), 5.0)) == pytest.approx(2.5, abs=1e-15)
    assert float(combined_loss(torch.tensor([1.0, 3.0]), torch.zeros(0), 5.0)) == 2.0
    assert float(combined_loss(torch.zeros(0), torch.tensor([0.2, 0.4]), 5.0)) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        combined_loss(torch.ones(1), torch.ones(1), -1.0)


def test_combined_loss_term_isolation():
    lm = torch.tensor([1.0, 2.0], requires_grad=True)
    dd = torch.tensor([0.3], requires_grad=True)
    combined_loss(lm, dd, 0.0).backward()
    assert torch.equal(dd.grad, torch.zeros(1))
    assert torch.equal(lm.grad, torch.full((2,), 0.5))
    lm.grad = None
    dd.grad = None
    combined_loss(lm, dd, 5.0).backward()
    assert torch.equal(dd.grad, torch.full((1,), 5.0)) and torch.equal(lm.grad, torch.full((2,), 0.5))


def test_cfg_combine_examples():
    c, u = torch.tensor([1.0, 2.0]), torch.tensor([0.0, 1.0])
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 3.0), torch.tensor([3.0, 4.0]))
    with pytest.raises(ValueError):
        cfg_combine(c, u, -0.5)


def test_timestep_embedding_shape_and_values():
    e = timestep_embedding(torch.tensor([0, 5]), 7)
    assert e.shape == (2, 7)
    assert torch.equal(e[0, :3], torch.ones(3)) and torch.equal(e[0, 3:], torch.zeros(4))
    assert abs(float(e[1, 0]) - math.cos(5.0)) < 1e-15
