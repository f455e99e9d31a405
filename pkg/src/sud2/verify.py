"""Numerical checks of the denoiser/score theory on analytic Gaussian mixtures.

Each ``check_*`` returns a :class:`VerificationReport`. Hard checks pass iff
the measured statistic is within tolerance; soft checks (``hard=False``)
only record a metric.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import distributions as dist
from .denoisers import AnalyticDenoiser, tweedie_score
from .losses import LossWeights, denoiser_loss, sud_pseudo_label

__all__ = [
    "VerificationReport",
    "standard_mixtures",
    "finite_difference_score",
    "denoiser_loss_gradient",
    "cross_entropy_fd_gradient",
    "check_tweedie",
    "check_learned_tweedie",
    "check_theorem1",
    "smoothed_density_d2_at_zero",
    "critical_sigma",
    "find_modes_1d",
    "check_mode_shift",
    "knn_entropy",
    "knn_entropy_grad",
    "knn_kl_divergence",
    "run_kl_toy",
    "check_kl_toy",
    "run_suite",
    "SUITES",
]


@dataclass
class VerificationReport:
    name: str
    passed: bool | None
    measured: float
    tolerance: float | None
    points: int = 0
    seeds: list = field(default_factory=list)
    wall_time: float = 0.0
    hard: bool = True
    details: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps(asdict(self), default=_jsonable, sort_keys=True)

    def __str__(self) -> str:
        status = "PASS" if self.passed else ("FAIL" if self.hard else "INFO")
        tol = f" (tol {self.tolerance:.3g})" if self.tolerance is not None else ""
        return f"[{status}] {self.name}: {self.measured:.4g}{tol} in {self.wall_time:.2f}s"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _report(name, measured, tol, t0, below=True, **kw) -> VerificationReport:
    ok = bool(measured <= tol) if below else bool(measured >= tol)
    return VerificationReport(name, ok, float(measured), float(tol), wall_time=time.perf_counter() - t0, **kw)


def standard_mixtures() -> dict[str, dist.GaussianMixture]:
    """The three oracle configurations: 1-D bimodal, 2-D three-component, 16-D two-component."""
    rng = np.random.default_rng(1234)
    m16 = rng.normal(size=(2, 16))
    m16 = 1.5 * m16 / np.linalg.norm(m16, axis=1, keepdims=True)
    return {
        "1d_bimodal": dist.GaussianMixture.symmetric_bimodal(1.0, 0.04),
        "2d_three": dist.GaussianMixture([0.3, 0.3, 0.4], [[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]], [0.3, 0.3, 0.3]),
        "16d_two": dist.GaussianMixture([0.6, 0.4], m16, [0.2, 0.5]),
    }


def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``|a - b| / |b|``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return np.linalg.norm(a - b, axis=1) / np.maximum(np.linalg.norm(b, axis=1), 1e-300)


def finite_difference_score(gmm: dist.GaussianMixture, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of :func:`~sud2.distributions.log_density`."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        out[:, j] = (dist.log_density(gmm, x + e) - dist.log_density(gmm, x - e)) / (2 * h)
    return out


def check_tweedie(gmm: dist.GaussianMixture, sigma: float, n_points: int = 100, seed: int = 0,
                  tol: float = 1e-10, fd_tol: float = 1e-5, name: str = "tweedie") -> VerificationReport:
    """Posterior mean of the mixture equals ``r + sigma^2 * score(smoothed, r)``.

    The denoiser output is compared with the per-component posterior mean
    (independent of the score code), and the score with finite differences of
    the smoothed log-density.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    t0 = time.perf_counter()
    sm = dist.smooth(gmm, sigma)
    r = dist.sample(sm, n_points, seed)
    den = dist.mmse_denoise(gmm, r, sigma)
    direct = dist.posterior_mean_direct(gmm, r, sigma)
    s = dist.score(sm, r)
    identity_err = _rel((den - r) / sigma**2, s).max()
    direct_err = _rel(den, direct).max()
    fd_err = _rel(finite_difference_score(sm, r), s).max()
    analytic = max(identity_err, direct_err)
    ok = analytic <= tol and fd_err <= fd_tol
    return VerificationReport(
        name, bool(ok), float(analytic), tol, points=n_points, seeds=[seed],
        wall_time=time.perf_counter() - t0,
        details={"identity_err": identity_err, "direct_posterior_err": direct_err,
                 "fd_err": fd_err, "fd_tol": fd_tol, "sigma": sigma, "dim": gmm.dim},
    )


def check_learned_tweedie(denoiser, gmm: dist.GaussianMixture, sigma: float, n_points: int = 500,
                          seed: int = 0, expected_cosine: float = 0.9) -> VerificationReport:
    """Soft check: a learned denoiser's residual score against the analytic score."""
    t0 = time.perf_counter()
    sm = dist.smooth(gmm, sigma)
    r = dist.sample(sm, n_points, seed)
    est = tweedie_score(denoiser, torch.as_tensor(r, dtype=torch.float32), sigma).double().numpy()
    true = dist.score(sm, r)
    cos = np.sum(est * true, 1) / (np.linalg.norm(est, axis=1) * np.linalg.norm(true, axis=1) + 1e-12)
    pearson = float(np.corrcoef(est.ravel(), true.ravel())[0, 1])
    return VerificationReport(
        "learned_tweedie", None, float(cos.mean()), None, points=n_points, seeds=[seed],
        wall_time=time.perf_counter() - t0, hard=False,
        details={"pearson": pearson, "expected_cosine": expected_cosine,
                 "max_rel_err": float(_rel(est, true).max())},
    )


def denoiser_loss_gradient(f: np.ndarray, denoiser, batch_scale: int | None = None) -> np.ndarray:
    """Autodiff gradient of the denoiser loss at reconstructions ``f`` with
    labels from ``denoiser`` held constant. ``batch_scale`` overrides the batch
    size used in the mean (to emulate a larger ``|U_y|``)."""
    ft = torch.tensor(f, dtype=torch.float64, requires_grad=True)
    labels = sud_pseudo_label(ft, denoiser, LossWeights(sigma2=0.0))
    loss = denoiser_loss(ft, labels)
    if batch_scale is not None:
        loss = loss * len(f) / batch_scale
    (g,) = torch.autograd.grad(loss, ft)
    return g.numpy()


def cross_entropy_fd_gradient(f: np.ndarray, smoothed: dist.GaussianMixture, h: float = 1e-5,
                              batch_scale: int | None = None) -> np.ndarray:
    """Finite-difference gradient of ``-(1/n) sum ln p(f_i)``."""
    n = batch_scale or len(f)
    return -finite_difference_score(smoothed, f, h) / n


def check_theorem1(gmm: dist.GaussianMixture, sigma: float, n_points: int = 50, seed: int = 0,
                   tol: float = 1e-4, name: str = "theorem1") -> VerificationReport:
    """Denoiser-loss gradient (autodiff, constant labels) equals ``2 sigma^2``
    times the finite-difference gradient of the Monte-Carlo cross entropy
    against the smoothed mixture."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    t0 = time.perf_counter()
    sm = dist.smooth(gmm, sigma)
    f = dist.sample(sm, n_points, seed)
    g_loss = denoiser_loss_gradient(f, AnalyticDenoiser(gmm, sigma))
    g_ce = cross_entropy_fd_gradient(f, sm)
    err = _rel(g_loss, 2 * sigma**2 * g_ce).max()
    return _report(name, err, tol, t0, points=n_points, seeds=[seed],
                   details={"sigma": sigma, "dim": gmm.dim})


def smoothed_density_d2_at_zero(m: float, component_var: float, sigma: float) -> float:
    """Second derivative at 0 of the smoothed symmetric bimodal density."""
    v = component_var + sigma**2
    g = math.exp(-0.5 * m * m / v) / math.sqrt(2 * math.pi * v)
    return g * (m * m / v**2 - 1.0 / v)


def critical_sigma(m: float, component_var: float, width: float = 1e-3, hi: float | None = None):
    """Bisection bracket ``(lo, hi)`` of the smallest sigma at which 0 stops
    being a local minimum of the smoothed density."""
    lo = 0.0
    if smoothed_density_d2_at_zero(m, component_var, lo) <= 0:
        return 0.0, 0.0
    hi = hi or 10.0 * (m + math.sqrt(component_var))
    if smoothed_density_d2_at_zero(m, component_var, hi) > 0:
        raise ValueError("upper bracket does not change sign")
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if smoothed_density_d2_at_zero(m, component_var, mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo, hi


def find_modes_1d(gmm: dist.GaussianMixture, step: float, half_width: float | None = None) -> np.ndarray:
    """Grid local maxima of a 1-D mixture density."""
    if gmm.dim != 1:
        raise ValueError("find_modes_1d needs a 1-D mixture")
    if half_width is None:
        half_width = np.abs(gmm.means).max() + 6 * math.sqrt(gmm.variances.max())
    grid = np.arange(-half_width, half_width + step / 2, step)
    ld = dist.log_density(gmm, grid[:, None])
    inner = (ld[1:-1] > ld[:-2]) & (ld[1:-1] >= ld[2:])
    return grid[1:-1][inner]


def check_mode_shift(m: float = 1.0, component_var: float = 0.04, sigma_list=(0.0, 0.1, 3.0),
                     resolution: float | None = None, small_sigma: float = 0.1, large_sigma: float = 3.0,
                     bracket_width: float = 1e-3) -> VerificationReport:
    """Smoothing a symmetric bimodal mixture merges its two modes into one at 0
    once sigma exceeds a critical value."""
    t0 = time.perf_counter()
    step = resolution or 1e-3 * m
    gmm = dist.GaussianMixture.symmetric_bimodal(m, component_var)
    modes = {}
    for s in sorted(set(sigma_list) | {small_sigma, large_sigma}):
        modes[float(s)] = find_modes_1d(dist.smooth(gmm, s), step).tolist()
    lo, hi = critical_sigma(m, component_var, bracket_width)
    small = modes[float(small_sigma)]
    large = modes[float(large_sigma)]
    two_small = len(small) == 2 and small[0] < 0 < small[1]
    one_large = len(large) == 1 and abs(large[0]) <= step
    bracket_ok = hi - lo <= bracket_width and lo < large_sigma and (lo > small_sigma or small_sigma >= hi)
    ok = two_small and one_large and bracket_ok
    return VerificationReport(
        f"mode_shift_m{m:g}", bool(ok), float(hi - lo), bracket_width, points=len(modes),
        wall_time=time.perf_counter() - t0,
        details={"modes": modes, "critical_sigma": [lo, hi], "m": m, "component_var": component_var,
                 "two_modes_at_small": two_small, "one_mode_at_large": one_large},
    )


# k-nearest-neighbour estimators ---------------------------------------------

def _log_unit_ball(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)


def knn_entropy(x: np.ndarray, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats)."""
    x = np.atleast_2d(x)
    n, d = x.shape
    if n <= k:
        raise ValueError("need more than k samples")
    dists, _ = cKDTree(x).query(x, k=k + 1)
    rho = np.maximum(dists[:, k], 1e-300)
    return float(digamma(n) - digamma(k) + _log_unit_ball(d) + d * np.mean(np.log(rho)))


def knn_entropy_grad(x: np.ndarray, k: int = 3) -> np.ndarray:
    """Gradient of :func:`knn_entropy` with neighbour assignments held fixed."""
    x = np.atleast_2d(x)
    n, d = x.shape
    dists, idx = cKDTree(x).query(x, k=k + 1)
    j = idx[:, k]
    diff = x - x[j]
    rho2 = np.maximum(dists[:, k] ** 2, 1e-300)
    term = diff / rho2[:, None]
    g = term.copy()
    np.add.at(g, j, -term)
    return (d / n) * g


def knn_kl_divergence(p: np.ndarray, q: np.ndarray, k: int = 3) -> float:
    """k-NN estimate of ``KL(P || Q)`` from samples (nats)."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    n, d = p.shape
    m = len(q)
    rho = cKDTree(p).query(p, k=k + 1)[0][:, k]
    nu = cKDTree(q).query(p, k=k)[0]
    nu = nu[:, k - 1] if nu.ndim == 2 else nu
    return float(d * np.mean(np.log(np.maximum(nu, 1e-300) / np.maximum(rho, 1e-300))) + math.log(m / (n - 1)))


def run_kl_toy(gmm: dist.GaussianMixture, sigma: float, n_outputs: int = 400, steps: int = 1500,
               seed: int = 0, lambda2: float = 1.0, k: int = 3, step_size: float | None = None,
               init_center=None, init_std: float = 0.3, n_reference: int = 4000, track_every: int = 50):
    """Gradient descent of free output points on
    ``(1 / (2 sigma^2)) * denoiser_loss - lambda2 * H_knn``.

    The denoiser term uses the analytic MMSE denoiser with constant labels, so
    its gradient is ``(f - D(f)) / (sigma^2 n)``. Returns a dict with the final
    points and the k-NN KL trajectory against samples of the smoothed target.
    """
    rng = np.random.default_rng(seed)
    sm = dist.smooth(gmm, sigma)
    den = AnalyticDenoiser(gmm, sigma)
    ref = dist.sample(sm, n_reference, seed + 1)
    if init_center is None:
        init_center = gmm.means.mean(0) + 4.0 * np.sqrt(sm.variances.max()) + np.abs(gmm.means).max()
    pts = np.asarray(init_center, dtype=np.float64) + init_std * rng.standard_normal((n_outputs, gmm.dim))
    if step_size is None:
        step_size = 0.05 * sm.variances.min()
    kl = [(0, knn_kl_divergence(pts, ref, k))]
    n = n_outputs
    for it in range(1, steps + 1):
        grad = (pts - den(pts)) / (sigma**2 * n)
        if lambda2 > 0:
            grad = grad - lambda2 * knn_entropy_grad(pts, k)
        pts = pts - step_size * n * grad
        if it % track_every == 0 or it == steps:
            kl.append((it, knn_kl_divergence(pts, ref, k)))
    return {"points": pts, "kl": kl, "reference": ref, "smoothed": sm}


def check_kl_toy(gmm: dist.GaussianMixture | None = None, sigma: float = 0.5, n_outputs: int = 400,
                 steps: int = 1500, seed: int = 0, ratio_tol: float = 0.25, collapse_tol: float = 0.10):
    """Entropy-regularized denoiser descent drives the k-NN KL estimate to at
    most ``ratio_tol`` of its start; without the entropy term the point cloud
    variance collapses below ``collapse_tol`` of the smoothed target's."""
    t0 = time.perf_counter()
    gmm = gmm or standard_mixtures()["2d_three"]
    full = run_kl_toy(gmm, sigma, n_outputs, steps, seed, lambda2=1.0)
    ablate = run_kl_toy(gmm, sigma, n_outputs, steps, seed, lambda2=0.0)
    kl0, kl1 = full["kl"][0][1], full["kl"][-1][1]
    ratio = kl1 / kl0
    target_var = float(np.trace(np.cov(full["reference"].T)))
    var_ratio = float(np.trace(np.cov(ablate["points"].T))) / target_var
    ok = kl0 > 0 and ratio <= ratio_tol and var_ratio <= collapse_tol
    return VerificationReport(
        "kl_toy", bool(ok), float(ratio), ratio_tol, points=n_outputs, seeds=[seed],
        wall_time=time.perf_counter() - t0,
        details={"kl_initial": kl0, "kl_final": kl1, "kl_trajectory": full["kl"],
                 "ablation_variance_ratio": var_ratio, "collapse_tol": collapse_tol,
                 "ablation_kl_final": ablate["kl"][-1][1], "sigma": sigma, "steps": steps},
    )


def _suite_tweedie(sigma=0.5, seed=0, n_points=100):
    return [check_tweedie(g, sigma, n_points, seed, name=f"tweedie_{k}") for k, g in standard_mixtures().items()]


def _suite_theorem1(sigma=0.5, seed=0, n_points=50):
    return [check_theorem1(g, sigma, n_points, seed, name=f"theorem1_{k}") for k, g in standard_mixtures().items()]


def _suite_mode_shift(**_):
    return [check_mode_shift(m) for m in (0.5, 1.0, 2.0)]


def _suite_kl(sigma=0.5, seed=0, **_):
    return [check_kl_toy(sigma=sigma, seed=seed)]


SUITES = {
    "tweedie": _suite_tweedie,
    "theorem1": _suite_theorem1,
    "mode_shift": _suite_mode_shift,
    "kl": _suite_kl,
}


def run_suite(name: str, sigma: float = 0.5, seed: int = 0) -> list[VerificationReport]:
    """Run a named suite; ``"theorems"`` runs all of them."""
    if name == "theorems":
        out = []
        for fn in SUITES.values():
            out.extend(fn(sigma=sigma, seed=seed))
        return out
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](sigma=sigma, seed=seed)
