"""Training objectives for semi-supervised reconstruction with a denoiser prior."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossWeights",
    "paired_loss",
    "sud_pseudo_label",
    "denoiser_loss",
    "correlation_loss",
    "pcc_matrix",
    "total_loss",
    "gradient_feature_distance",
]

PCC_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """``lambda1`` weights the denoiser term, ``lambda2`` the diversity term,
    ``sigma2`` is the std of the noise injected before denoising."""

    lambda1: float = 0.01
    lambda2: float = 10.0
    sigma2: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "sigma2"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")


def _sq_dist_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] == 0:
        return a.new_zeros(())
    return (a - b).pow(2).reshape(a.shape[0], -1).sum(1).mean()


def paired_loss(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sample squared L2 error. Empty batch gives 0."""
    return _sq_dist_mean(predictions, targets)


def sud_pseudo_label(reconstruction: torch.Tensor, denoiser, weights: LossWeights,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """``D(f + nu2)`` with ``nu2 ~ N(0, sigma2^2 I)``, detached from the graph."""
    r = reconstruction.detach()
    if weights.sigma2 > 0:
        r = r + weights.sigma2 * torch.randn(r.shape, generator=generator, dtype=r.dtype, device=r.device)
    return denoiser(r, generator=generator).detach()


def denoiser_loss(reconstructions: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 distance to the pseudo-labels.

    Labels are treated as constants, so the gradient with respect to each
    reconstruction is ``2 (f - z) / batch``.
    """
    return _sq_dist_mean(reconstructions, labels.detach())


def pcc_matrix(latents: torch.Tensor) -> torch.Tensor:
    """``B x B`` Pearson correlation between flattened per-sample latents.

    The normalizer carries ``+1e-8`` so constant latents give 0 instead of NaN.
    """
    x = latents.reshape(latents.shape[0], -1)
    x = x - x.mean(dim=1, keepdim=True)
    norms = x.norm(dim=1)
    return (x @ x.T) / (norms[:, None] * norms[None, :] + PCC_EPS)


def correlation_loss(latents: torch.Tensor) -> torch.Tensor:
    """Mean squared off-diagonal PCC of a batch of latents, in ``[0, 1]``."""
    b = latents.shape[0]
    if b < 2:
        raise ValueError("correlation_loss needs a batch of at least 2")
    c = pcc_matrix(latents)
    off = ~torch.eye(b, dtype=torch.bool, device=c.device)
    return c[off].pow(2).mean()


def total_loss(paired, denoiser, reg, weights: LossWeights, perceptual=0.0):
    """``paired + lambda1 * denoiser + lambda2 * reg (+ perceptual)``."""
    return paired + weights.lambda1 * denoiser + weights.lambda2 * reg + perceptual


def _gaussian_derivative_kernels(sigma: float, dtype, device):
    radius = max(1, int(round(3 * sigma)))
    u = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    g = torch.exp(-0.5 * (u / sigma) ** 2)
    g = g / g.sum()
    dg = -u / sigma**2 * g
    kx = (g[:, None] * dg[None, :])[None, None]
    ky = (dg[:, None] * g[None, :])[None, None]
    return kx, ky, radius


def gradient_feature_distance(a: torch.Tensor, b: torch.Tensor, sigmas=(1.0, 2.0)) -> torch.Tensor:
    """Cheap perceptual-style distance: mean squared difference of
    derivative-of-Gaussian responses at a few scales, per-sample summed and
    batch-averaged like :func:`paired_loss`. Inputs are ``(B, C, H, W)``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] == 0:
        return a.new_zeros(())
    c = a.shape[1]
    diff = a - b
    total = a.new_zeros(())
    for s in sigmas:
        kx, ky, pad = _gaussian_derivative_kernels(s, a.dtype, a.device)
        for k in (kx, ky):
            # replicate padding keeps constant offsets invisible at the border
            padded = F.pad(diff, (pad, pad, pad, pad), mode="replicate")
            resp = F.conv2d(padded, k.expand(c, 1, -1, -1), groups=c)
            total = total + resp.pow(2).reshape(a.shape[0], -1).sum(1).mean()
    return total
