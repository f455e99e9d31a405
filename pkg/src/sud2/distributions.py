"""Isotropic Gaussian mixtures with closed-form density, score and MMSE denoiser.

Every quantity here is exact, which makes these mixtures the ground-truth
oracle for the denoiser/score identities checked in :mod:`sud2.verify`.
Points are float64 arrays of shape ``(d,)`` or batches of shape ``(n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "GaussianMixture",
    "SmoothingNoise",
    "log_density",
    "smooth",
    "score",
    "mmse_denoise",
    "sample",
    "responsibilities",
    "save_mixture",
    "load_mixture",
]


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians ``sum_k w_k N(mu_k, var_k I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        var = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if len(w) == 0:
            raise ValueError("mixture needs at least one component")
        if mu.shape[0] != len(w) or var.shape[0] != len(w):
            raise ValueError(
                f"component count mismatch: {len(w)} weights, {mu.shape[0]} means, {var.shape[0]} variances"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("weights", "means", "variances"))

    __hash__ = None

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @classmethod
    def single(cls, mean, variance: float) -> "GaussianMixture":
        return cls([1.0], np.atleast_2d(np.asarray(mean, dtype=np.float64)), [variance])

    @classmethod
    def from_samples(cls, points, variance: float) -> "GaussianMixture":
        """Equal-weight kernel mixture centred on ``points`` (flattened per sample)."""
        pts = np.asarray(points, dtype=np.float64)
        pts = pts.reshape(len(pts), -1)
        n = len(pts)
        return cls(np.full(n, 1.0 / n), pts, np.full(n, float(variance)))

    @classmethod
    def symmetric_bimodal(cls, m: float, variance: float, dim: int = 1) -> "GaussianMixture":
        mu = np.zeros((2, dim))
        mu[0, 0], mu[1, 0] = -m, m
        return cls([0.5, 0.5], mu, [variance, variance])


@dataclass(frozen=True)
class SmoothingNoise:
    """Isotropic Gaussian noise ``N(0, sigma^2 I)``."""

    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


def _sigma(noise) -> float:
    return noise.sigma if isinstance(noise, SmoothingNoise) else float(noise)


def _as_points(gmm: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != gmm.dim:
        raise ValueError(f"expected points of dimension {gmm.dim}, got shape {x.shape}")
    return x2, single


def _component_logpdf(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    # (n, K) log of w_k N(x; mu_k, var_k I)
    if x.shape[0] * gmm.means.size <= 1 << 22:
        sq = ((x[:, None, :] - gmm.means[None, :, :]) ** 2).sum(-1)
    else:
        # large batches of high-dimensional points: expand the square
        sq = (x * x).sum(1)[:, None] + (gmm.means * gmm.means).sum(1)[None, :] - 2.0 * x @ gmm.means.T
        sq = np.maximum(sq, 0.0)
    d = gmm.dim
    return (
        np.log(gmm.weights)[None, :]
        - 0.5 * d * np.log(2 * math.pi * gmm.variances)[None, :]
        - 0.5 * sq / gmm.variances[None, :]
    )


def log_density(gmm: GaussianMixture, x) -> np.ndarray | float:
    """``ln sum_k w_k N(x; mu_k, var_k I)`` via log-sum-exp."""
    pts, single = _as_points(gmm, x)
    out = logsumexp(_component_logpdf(gmm, pts), axis=1)
    return float(out[0]) if single else out


def responsibilities(gmm: GaussianMixture, x) -> np.ndarray:
    """Posterior component probabilities, shape ``(n, K)``."""
    pts, _ = _as_points(gmm, x)
    return softmax(_component_logpdf(gmm, pts), axis=1)


def smooth(gmm: GaussianMixture, noise) -> GaussianMixture:
    """Density of ``x + nu`` for ``x ~ gmm`` and ``nu ~ N(0, sigma^2 I)``."""
    s = _sigma(noise)
    if s < 0:
        raise ValueError("sigma must be nonnegative")
    return GaussianMixture(gmm.weights, gmm.means, gmm.variances + s * s)


def score(gmm: GaussianMixture, x) -> np.ndarray:
    """Gradient of :func:`log_density` with respect to ``x``."""
    pts, single = _as_points(gmm, x)
    r = responsibilities(gmm, pts)
    diff = (gmm.means[None, :, :] - pts[:, None, :]) / gmm.variances[None, :, None]
    out = (r[:, :, None] * diff).sum(1)
    return out[0] if single else out


def mmse_denoise(gmm: GaussianMixture, r, noise) -> np.ndarray:
    """Posterior mean ``E[x | x + nu = r]``.

    Evaluated through the smoothed score, ``r + sigma^2 * score(smooth(gmm), r)``,
    which for a Gaussian mixture is the exact posterior mean.
    """
    s = _sigma(noise)
    if not s > 0:
        raise ValueError("mmse_denoise requires sigma > 0; use r directly for sigma = 0")
    pts, single = _as_points(gmm, r)
    out = pts + s * s * score(smooth(gmm, s), pts)
    return out[0] if single else out


def posterior_mean_direct(gmm: GaussianMixture, r, noise) -> np.ndarray:
    """Posterior mean from per-component Gaussian shrinkage.

    Independent of the score path: ``sum_k q_k (var_k r + s^2 mu_k)/(var_k + s^2)``
    with ``q_k`` the responsibilities under the smoothed mixture.
    """
    s = _sigma(noise)
    pts, single = _as_points(gmm, r)
    sm = smooth(gmm, s)
    q = responsibilities(sm, pts)
    var = gmm.variances[None, :, None]
    shrunk = (var * pts[:, None, :] + s * s * gmm.means[None, :, :]) / (var + s * s)
    out = (q[:, :, None] * shrunk).sum(1)
    return out[0] if single else out


def sample(gmm: GaussianMixture, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws, shape ``(n, d)``; identical seed gives identical draws."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.empty((0, gmm.dim))
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.sqrt(gmm.variances[comp])[:, None] * z


def save_mixture(gmm: GaussianMixture, path) -> None:
    """Write the mixture as ``key = value`` lines (flat arrays, row-major means)."""
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))
    text = (
        "# isotropic gaussian mixture\n"
        f"dim = {gmm.dim}\n"
        f"weights = {fmt(gmm.weights)}\n"
        f"means = {fmt(gmm.means)}\n"
        f"variances = {fmt(gmm.variances)}\n"
    )
    Path(path).write_text(text)


def load_mixture(path) -> GaussianMixture:
    fields = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    missing = {"dim", "weights", "means", "variances"} - fields.keys()
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    dim = int(fields["dim"])
    parse = lambda s: np.array([float(v) for v in s.split()])
    means = parse(fields["means"]).reshape(-1, dim)
    return GaussianMixture(parse(fields["weights"]), means, parse(fields["variances"]))
