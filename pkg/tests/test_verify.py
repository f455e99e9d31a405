import json
import math

import numpy as np
import pytest
from scipy import optimize

from sud2 import distributions as dist
from sud2.denoisers import AnalyticDenoiser
from sud2.verify import (VerificationReport, check_mode_shift, check_theorem1, check_tweedie, critical_sigma,
                         cross_entropy_fd_gradient, denoiser_loss_gradient, find_modes_1d, knn_entropy,
                         knn_kl_divergence, run_kl_toy, run_suite, smoothed_density_d2_at_zero, standard_mixtures)


def test_report_serialization():
    rep = VerificationReport("x", True, 1e-12, 1e-10, points=3, seeds=[0], wall_time=0.1,
                             details={"arr": np.arange(2), "v": np.float64(2.0)})
    back = json.loads(rep.to_line())
    assert back["name"] == "x" and back["passed"] is True and back["details"]["arr"] == [0, 1]
    assert str(rep).startswith("[PASS] x")
    assert str(VerificationReport("y", None, 0.5, None, hard=False)).startswith("[INFO]")
    assert str(VerificationReport("z", False, 0.5, 0.1)).startswith("[FAIL]")


@pytest.mark.parametrize("name", ["1d_bimodal", "2d_three", "16d_two"])
def test_tweedie_and_theorem1_pass_on_every_config(name):
    g = standard_mixtures()[name]
    tw = check_tweedie(g, 0.5, 100, seed=0)
    assert tw.passed and tw.measured <= 1e-10 and tw.details["fd_err"] <= 1e-5
    th = check_theorem1(g, 0.5, 50, seed=0)
    assert th.passed and th.measured <= 1e-4


def test_pass_flag_matches_tolerance():
    g = standard_mixtures()["2d_three"]
    strict = check_tweedie(g, 0.5, 20, seed=0, tol=0.0, fd_tol=0.0)
    assert strict.passed is False
    rep = check_theorem1(g, 0.5, 20, seed=0)
    assert rep.passed == (rep.measured <= rep.tolerance)


def test_tweedie_single_gaussian_closed_form():
    g = dist.GaussianMixture.single([0.4], 0.8)
    rep = check_tweedie(g, 0.3, 50, seed=2)
    assert rep.passed
    r = dist.sample(dist.smooth(g, 0.3), 50, seed=2)
    want = (0.8 * r + 0.09 * 0.4) / (0.8 + 0.09)
    np.testing.assert_allclose(dist.mmse_denoise(g, r, 0.3), want, rtol=1e-10)


def test_gradients_vanish_at_smoothed_mode():
    g = standard_mixtures()["1d_bimodal"]
    sigma = 0.5
    sm = dist.smooth(g, sigma)
    mode = optimize.brentq(lambda t: dist.score(sm, [t])[0], 0.3, 1.5, xtol=1e-14)
    f = np.array([[mode], [-mode]])
    g_loss = denoiser_loss_gradient(f, AnalyticDenoiser(g, sigma))
    g_ce = cross_entropy_fd_gradient(f, sm)
    assert np.linalg.norm(g_loss) <= 1e-8
    assert np.linalg.norm(g_ce) <= 1e-8


def test_batch_size_scaling_is_shared():
    g = standard_mixtures()["2d_three"]
    sigma = 0.5
    f = dist.sample(dist.smooth(g, sigma), 10, seed=0)
    d = AnalyticDenoiser(g, sigma)
    base_loss, base_ce = denoiser_loss_gradient(f, d), cross_entropy_fd_gradient(f, dist.smooth(g, sigma))
    for k in (2, 5):
        gl = denoiser_loss_gradient(f, d, batch_scale=k * len(f))
        gc = cross_entropy_fd_gradient(f, dist.smooth(g, sigma), batch_scale=k * len(f))
        np.testing.assert_allclose(gl, base_loss / k, rtol=1e-12)
        np.testing.assert_allclose(gc, base_ce / k, rtol=1e-12)
        np.testing.assert_allclose(gl, 2 * sigma**2 * gc, rtol=1e-4)


def test_mode_shift_examples():
    g = dist.GaussianMixture.symmetric_bimodal(1.0, 0.04)
    modes = find_modes_1d(g, 1e-3)
    np.testing.assert_allclose(modes, [-1.0, 1.0], atol=1e-3)
    large = find_modes_1d(dist.smooth(g, 3.0), 1e-3)
    assert len(large) == 1 and abs(large[0]) <= 1e-3
    rep = check_mode_shift(1.0, 0.04)
    assert rep.passed
    lo, hi = rep.details["critical_sigma"]
    assert hi - lo <= 1e-3
    # independent closed form: d2 at 0 changes sign where m^2 = var + sigma^2
    assert lo <= math.sqrt(1.0 - 0.04) <= hi


def test_critical_sigma_brackets_sign_change_and_is_monotone():
    crit = []
    for m in (0.5, 1.0, 2.0):
        lo, hi = critical_sigma(m, 0.04)
        assert smoothed_density_d2_at_zero(m, 0.04, lo) > 0 >= smoothed_density_d2_at_zero(m, 0.04, hi)
        crit.append(0.5 * (lo + hi))
    assert crit[0] < crit[1] < crit[2]
    # modes already merged without smoothing
    assert critical_sigma(0.1, 0.04) == (0.0, 0.0)


def test_knn_estimators_on_known_gaussians():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 2))
    assert knn_entropy(x) == pytest.approx(math.log(2 * math.pi * math.e), abs=0.05)
    y = rng.normal(size=(4000, 2)) * 2.0
    # KL(N(0, I) || N(0, 4I)) in 2-D
    want = 0.5 * (2 * 0.25 - 2 + 2 * math.log(4))
    assert knn_kl_divergence(x, y) == pytest.approx(want, abs=0.08)
    assert abs(knn_kl_divergence(x, rng.normal(size=(4000, 2)))) < 0.05


def test_kl_toy_is_deterministic():
    g = standard_mixtures()["2d_three"]
    a = run_kl_toy(g, 0.5, n_outputs=100, steps=60, seed=3)
    b = run_kl_toy(g, 0.5, n_outputs=100, steps=60, seed=3)
    np.testing.assert_array_equal(a["points"], b["points"])
    assert a["kl"] == b["kl"]


def test_suites_are_deterministic():
    a = [r.measured for r in run_suite("tweedie", sigma=0.3, seed=4)]
    b = [r.measured for r in run_suite("tweedie", sigma=0.3, seed=4)]
    assert a == b
    assert all(r.details["sigma"] == 0.3 for r in run_suite("theorem1", sigma=0.3))
    with pytest.raises(KeyError):
        run_suite("nope")


@pytest.fixture(scope="module")
def single_gaussian_run():
    g = dist.GaussianMixture.single([1.0, -0.5], 0.5)
    return run_kl_toy(g, 0.5, n_outputs=400, steps=1500, seed=0)


def test_kl_toy_single_gaussian_mean(single_gaussian_run):
    pts = single_gaussian_run["points"]
    target = np.array([1.0, -0.5])
    assert np.linalg.norm(pts.mean(0) - target) <= 0.1 * np.linalg.norm(target)
    kl = single_gaussian_run["kl"]
    assert kl[-1][1] <= 0.25 * kl[0][1]


@pytest.mark.xfail(strict=True, reason="fixed-neighbour k-NN entropy gradient over-disperses free points; "
                                       "see notes/decisions.md")
def test_kl_toy_single_gaussian_covariance(single_gaussian_run):
    cov = np.cov(single_gaussian_run["points"].T)
    target = 0.75 * np.eye(2)
    assert np.linalg.norm(cov - target) <= 0.1 * np.linalg.norm(target)
