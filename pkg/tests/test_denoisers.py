import math

import numpy as np
import pytest
import torch

from sud2 import distributions as dist
from sud2.denoisers import (AnalyticDenoiser, AutoencoderDenoiser, DiffusionDenoiser, IdentityDenoiser,
                            NoiseSchedule, autoencoder_denoise, ddpm_forward, ddpm_reverse, ddpm_roundtrip,
                            forward_variance, linear_schedule, tweedie_score)
from sud2.models import UNetConfig, build_autoencoder
from sud2.tasks import psnr
from sud2.trainer import ddpm_eps_mse, pretrain_denoiser, to_images, to_tensor
from sud2.verify import check_learned_tweedie, standard_mixtures


def zero_eps(x, t):
    return torch.zeros_like(x)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


# schedules -------------------------------------------------------------------

def test_schedule_invariants():
    s = linear_schedule(100)
    assert len(s) == 100
    assert np.all(np.diff(s.alpha_bars) <= 0)
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-12)
    np.testing.assert_allclose(np.cumprod(s.alphas), s.alpha_bars, rtol=1e-12)
    with pytest.raises(ValueError):
        NoiseSchedule([0.5, 0.0])
    with pytest.raises(ValueError):
        NoiseSchedule([1.2])


def test_schedule_record_roundtrip():
    for s in (linear_schedule(40), NoiseSchedule([0.9, 0.8, 0.95])):
        assert NoiseSchedule.from_record(s.to_record()) == s


# forward chain ---------------------------------------------------------------

def test_forward_all_ones_is_identity():
    s = NoiseSchedule(np.ones(10))
    r = torch.randn(3, 4)
    for t in (0, 5, 9):
        assert torch.equal(ddpm_forward(r, t, s, gen()), r)


def test_forward_single_step_hand_expansion():
    s = NoiseSchedule([0.99, 0.9])
    r = torch.randn(2, 5, dtype=torch.float64)
    z0 = torch.randn(r.shape, generator=gen(4), dtype=torch.float64)
    out = ddpm_forward(r, 0, s, gen(4))
    torch.testing.assert_close(out, math.sqrt(0.99) * r + 0.01 * z0, rtol=0, atol=1e-15)


def test_forward_variance_monte_carlo():
    s = linear_schedule(20)
    for t in (0, 7, 19):
        out = ddpm_forward(torch.zeros(10000, dtype=torch.float64), t, s, gen(t))
        assert out.var().item() == pytest.approx(forward_variance(t, s), rel=0.05)


def test_forward_step_range():
    s = linear_schedule(5)
    with pytest.raises(ValueError):
        ddpm_forward(torch.zeros(1), 5, s)
    with pytest.raises(ValueError):
        ddpm_reverse(torch.zeros(1), -1, s, zero_eps)


# reverse chain ---------------------------------------------------------------

def test_reverse_degenerate_identity():
    s = NoiseSchedule(np.ones(8))
    x = torch.randn(4, 3)
    assert torch.equal(ddpm_reverse(x, 7, s, zero_eps, gen()), x)
    assert torch.equal(ddpm_roundtrip(x, 7, s, zero_eps, gen()), x)


def test_reverse_t0_is_one_noiseless_step():
    s = NoiseSchedule([0.9, 0.8])
    x = torch.randn(6, dtype=torch.float64)
    eps = torch.full_like(x, 0.3)
    out = ddpm_reverse(x, 0, s, lambda v, t: eps, gen(1))
    want = (x - 0.1 / math.sqrt(0.1) * eps) / math.sqrt(0.9)
    torch.testing.assert_close(out, want, rtol=0, atol=1e-14)
    # no randomness consumed at the last step
    assert torch.equal(out, ddpm_reverse(x, 0, s, lambda v, t: eps, gen(2)))


def test_reverse_calls_eps_net_with_step_indices():
    s = linear_schedule(6)
    seen = []

    def eps(x, t):
        seen.append(t.tolist())
        return torch.zeros_like(x)

    ddpm_reverse(torch.zeros(3, 2), 4, s, eps, gen())
    assert seen == [[i] * 3 for i in (4, 3, 2, 1, 0)]


def test_reverse_rejects_bad_eps_shape():
    with pytest.raises(RuntimeError):
        ddpm_reverse(torch.zeros(3, 2), 1, linear_schedule(4), lambda x, t: torch.zeros(3), gen())


@pytest.mark.parametrize("tau2", [1.0, 0.25])
def test_reverse_samples_single_gaussian(tau2):
    # optimal eps for N(mu, tau2) data under the standard marginal x_t = sqrt(abar) x0 + sqrt(1-abar) e
    mu = 2.0
    s = linear_schedule(100)
    abar = torch.tensor(s.alpha_bars)

    def eps_star(x, t):
        a = abar[t].to(x.dtype)
        return torch.sqrt(1 - a) * (x - torch.sqrt(a) * mu) / (a * tau2 + 1 - a)

    x_T = torch.randn(5000, generator=gen(0), dtype=torch.float64)
    out = ddpm_reverse(x_T, len(s) - 1, s, eps_star, gen(1))
    assert out.mean().item() == pytest.approx(mu, rel=0.05)
    assert out.var().item() == pytest.approx(tau2, rel=0.05)


class ScaleEps(torch.nn.Module):
    def forward(self, x, t):
        return 0.1 * x


def test_diffusion_denoiser_seed_determinism():
    d = DiffusionDenoiser(ScaleEps(), linear_schedule(10), 5)
    assert d.stochastic
    x = torch.randn(2, 3)
    a = d(x, gen(9))
    assert a.shape == x.shape
    assert torch.equal(a, d(x, gen(9)))
    assert not torch.equal(a, d(x, gen(10)))
    torch.testing.assert_close(a, ddpm_roundtrip(x, 4, d.schedule, d.eps_net, gen(9)))


# denoiser realizations ----------------------------------------------------------

def test_identity_and_shape_contract():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(IdentityDenoiser()(x), x)
    assert torch.count_nonzero(tweedie_score(IdentityDenoiser(), x, 0.3)) == 0
    with pytest.raises(ValueError):
        tweedie_score(IdentityDenoiser(), x, 0.0)


def test_analytic_denoiser_tweedie_identity():
    g = standard_mixtures()["2d_three"]
    sigma = 0.4
    r = dist.sample(dist.smooth(g, sigma), 50, seed=1)
    d = AnalyticDenoiser(g, sigma)
    est = tweedie_score(d, torch.tensor(r), sigma).numpy()
    true = dist.score(dist.smooth(g, sigma), r)
    assert np.max(np.linalg.norm(est - true, axis=1) / np.linalg.norm(true, axis=1)) <= 1e-10
    np.testing.assert_allclose(d(r), dist.mmse_denoise(g, r, sigma))


def test_analytic_denoiser_flattens_images():
    imgs = np.random.default_rng(0).uniform(-1, 1, size=(6, 3, 4, 4))
    g = dist.GaussianMixture.from_samples(imgs, 1e-3)
    d = AnalyticDenoiser(g, 0.05)
    out = d(torch.tensor(imgs, dtype=torch.float32))
    assert out.shape == (6, 3, 4, 4)
    # each stored image is (close to) a fixed point of its own kernel
    np.testing.assert_allclose(out.numpy(), imgs, atol=1e-4)


def test_autoencoder_untrained_is_near_identity():
    net = build_autoencoder(UNetConfig(base_width=4, depth=2), seed=0)
    x = torch.rand(3, 3, 16, 16) * 2 - 1
    out = autoencoder_denoise(net, x)
    assert out.shape == x.shape
    assert (out - x).abs().max().item() < 1e-2


def test_autoencoder_shape_contract_violation():
    class Bad(torch.nn.Module):
        def forward(self, x):
            return x[:, :1]

    with pytest.raises(RuntimeError):
        autoencoder_denoise(Bad(), torch.zeros(1, 3, 4, 4))


@pytest.mark.slow
def test_autoencoder_single_constant_image():
    const = np.full((1, 16, 16, 3), 0.3, dtype=np.float32)
    data = np.repeat(const, 64, axis=0)
    net = build_autoencoder(UNetConfig(base_width=4, depth=2), seed=0)
    net, _ = pretrain_denoiser(data, net, sigma_range=(0.1, 0.3), epochs=15, seed=0, batch_size=16)
    noisy = to_tensor(const) + 0.25 * torch.randn(8, 3, 16, 16, generator=gen(3))
    out = AutoencoderDenoiser(net)(noisy)
    target = to_tensor(const)
    assert (out - target).pow(2).mean() <= (noisy - target).pow(2).mean()


@pytest.mark.slow
def test_learned_denoiser_residual_tracks_analytic_score(gmm2d_denoiser):
    net, gmm, sigma = gmm2d_denoiser
    rep = check_learned_tweedie(AutoencoderDenoiser(net), gmm, sigma, n_points=1000, seed=5)
    assert rep.hard is False and rep.passed is None
    assert rep.measured >= 0.9
    assert rep.details["pearson"] >= 0.9


# trained diffusion net -----------------------------------------------------------

@pytest.mark.slow
def test_ddpm_beats_chance(tiny_ddpm, faces16):
    net, schedule, report = tiny_ddpm
    assert all(np.isfinite(report["loss"]))
    assert ddpm_eps_mse(net, faces16.heldout_x, schedule) < 1.0


@pytest.mark.slow
def test_roundtrip_stays_near_input(tiny_ddpm, faces16):
    net, schedule, _ = tiny_ddpm
    x = to_tensor(faces16.heldout_x[:12])
    out = to_images(DiffusionDenoiser(net, schedule, 10)(x, gen(0)))
    xs = faces16.heldout_x[:12]
    own = [psnr(o, a) for o, a in zip(out, xs)]
    other = [psnr(o, a) for o, a in zip(out, np.roll(xs, 1, axis=0))]
    assert np.mean(own) >= np.mean(other)


@pytest.mark.slow
def test_full_chain_forgets_input(tiny_ddpm, faces16):
    net, schedule, _ = tiny_ddpm
    x = to_tensor(faces16.heldout_x[:2])
    T = len(schedule) - 1
    # same noise for both inputs
    d = DiffusionDenoiser(net, schedule, T + 1)
    a = d(x[:1], gen(5))
    b = d(x[1:2], gen(5))
    corr = lambda u, v: float(np.corrcoef(u.ravel(), v.ravel())[0, 1])
    assert corr(a.numpy(), b.numpy()) > corr(a.numpy(), x[:1].numpy())


def test_diffusion_denoiser_validates_steps():
    with pytest.raises(ValueError):
        DiffusionDenoiser(zero_eps, linear_schedule(5), 6)
    with pytest.raises(ValueError):
        DiffusionDenoiser(zero_eps, linear_schedule(5), 0)
