"""Supervising denoisers: analytic mixture oracle, one-step autoencoder, DDPM chain.

All realizations share the call signature ``denoiser(x, generator=None)`` and
return a tensor shaped like ``x``. They never build an autograd graph, which
is what makes their outputs usable as constant pseudo-labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import distributions as dist

__all__ = [
    "NoiseSchedule",
    "linear_schedule",
    "ddpm_forward",
    "ddpm_reverse",
    "ddpm_roundtrip",
    "forward_variance",
    "autoencoder_denoise",
    "tweedie_score",
    "Denoiser",
    "IdentityDenoiser",
    "AnalyticDenoiser",
    "AutoencoderDenoiser",
    "DiffusionDenoiser",
]


class NoiseSchedule:
    """Per-step retention factors ``alphas`` and their running products ``alpha_bars``."""

    def __init__(self, alphas, kind: str = "custom", endpoints: tuple[float, float] | None = None):
        a = np.asarray(alphas, dtype=np.float64).reshape(-1)
        if len(a) == 0:
            raise ValueError("schedule must have at least one step")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must lie in (0, 1]")
        self.alphas = a
        self.alpha_bars = np.cumprod(a)
        self.kind = kind
        self.endpoints = endpoints

    def __len__(self) -> int:
        return len(self.alphas)

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and np.array_equal(self.alphas, other.alphas)

    def __repr__(self) -> str:
        return f"NoiseSchedule(kind={self.kind!r}, T={len(self)}, endpoints={self.endpoints})"

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "T": len(self)}
        if self.kind == "linear":
            rec["beta_start"], rec["beta_end"] = self.endpoints
        else:
            rec["alphas"] = self.alphas.tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "NoiseSchedule":
        if rec["kind"] == "linear":
            return linear_schedule(int(rec["T"]), float(rec["beta_start"]), float(rec["beta_end"]))
        return cls(rec["alphas"], kind=rec["kind"])


def linear_schedule(T: int = 100, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """``1 - alpha`` rising linearly from ``beta_start`` to ``beta_end``.

    Defaults are the usual 1e-4..0.02 over 1000 steps, rescaled by ``1000/T``
    so shorter chains reach a comparable final ``alpha_bar``.
    """
    if beta_start is None:
        beta_start = 1e-4 * 1000 / T
    if beta_end is None:
        beta_end = min(0.02 * 1000 / T, 0.999)
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(1.0 - betas, kind="linear", endpoints=(float(beta_start), float(beta_end)))


def _check_step(t: int, schedule: NoiseSchedule) -> None:
    if not 0 <= t < len(schedule):
        raise ValueError(f"step index {t} outside [0, {len(schedule)})")


def ddpm_forward(r: torch.Tensor, t: int, schedule: NoiseSchedule,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Noising chain: ``t + 1`` steps of ``r <- sqrt(a_i) r + (1 - a_i) z_i``."""
    _check_step(t, schedule)
    x = r
    for i in range(t + 1):
        a = float(schedule.alphas[i])
        z = torch.randn(r.shape, generator=generator, dtype=r.dtype, device=r.device)
        x = math.sqrt(a) * x + (1.0 - a) * z
    return x


def forward_variance(t: int, schedule: NoiseSchedule) -> float:
    """Closed-form per-coordinate variance of ``ddpm_forward(0, t)``."""
    _check_step(t, schedule)
    v = 0.0
    for i in range(t + 1):
        a = schedule.alphas[i]
        v = a * v + (1.0 - a) ** 2
    return float(v)


def _step_index(x: torch.Tensor, i: int) -> torch.Tensor:
    return torch.full((x.shape[0],), i, dtype=torch.long, device=x.device)


def ddpm_reverse(noisy: torch.Tensor, t: int, schedule: NoiseSchedule, eps_net,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Walk steps ``t, t-1, ..., 0`` of the ancestral denoising chain.

    Each step is ``x <- (x - (1-a_i)/sqrt(1-abar_i) * eps(x, i)) / sqrt(a_i) + sqrt(1-a_i) z_i``;
    the last step (``i = 0``) adds no noise. ``eps_net(x, steps)`` receives a
    batch of integer step indices.
    """
    _check_step(t, schedule)
    x = noisy
    for i in range(t, -1, -1):
        a = float(schedule.alphas[i])
        abar = float(schedule.alpha_bars[i])
        eps = eps_net(x, _step_index(x, i))
        if eps.shape != x.shape:
            raise RuntimeError(f"eps_net returned shape {tuple(eps.shape)}, expected {tuple(x.shape)}")
        # an alpha of exactly 1 contributes neither noise nor correction
        coef = 0.0 if a == 1.0 else (1.0 - a) / math.sqrt(1.0 - abar)
        x = (x - coef * eps) / math.sqrt(a)
        if i > 0:
            z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = x + math.sqrt(1.0 - a) * z
    return x


def ddpm_roundtrip(r: torch.Tensor, t: int, schedule: NoiseSchedule, eps_net,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """``ddpm_reverse(ddpm_forward(r, t), t)``: the diffusion pseudo-label."""
    return ddpm_reverse(ddpm_forward(r, t, schedule, generator), t, schedule, eps_net, generator)


def autoencoder_denoise(net: nn.Module, r: torch.Tensor) -> torch.Tensor:
    """Single deterministic forward pass of a trained denoiser in eval mode."""
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(r)
    net.train(was_training)
    if out.shape != r.shape:
        raise RuntimeError(f"denoiser returned shape {tuple(out.shape)}, expected {tuple(r.shape)}")
    return out


def tweedie_score(denoiser, r, sigma: float, generator=None):
    """Score estimate ``(D(r) - r) / sigma^2`` from a denoiser's residual."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    out = denoiser(r, generator=generator)
    return (out - r) / sigma**2


class Denoiser:
    """Base class. Subclasses implement :meth:`denoise`."""

    stochastic = False

    def __call__(self, x, generator: torch.Generator | None = None):
        with torch.no_grad():
            out = self.denoise(x, generator)
        if out.shape != x.shape:
            raise RuntimeError(f"{type(self).__name__} changed shape {tuple(x.shape)} -> {tuple(out.shape)}")
        return out

    def denoise(self, x, generator):
        raise NotImplementedError

    def parameters(self):
        return iter(())


class IdentityDenoiser(Denoiser):
    def denoise(self, x, generator):
        return x.clone() if isinstance(x, torch.Tensor) else np.array(x, copy=True)


class AnalyticDenoiser(Denoiser):
    """Exact MMSE denoiser for a Gaussian mixture at noise level ``sigma``.

    Accepts numpy arrays or tensors of shape ``(n, d)`` / ``(d,)``, or
    ``(n, ...)`` batches that are flattened per sample; tensors are evaluated
    in float64 and cast back.
    """

    def __init__(self, gmm: dist.GaussianMixture, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.gmm = gmm
        self.sigma = float(sigma)

    def denoise(self, x, generator):
        if isinstance(x, torch.Tensor):
            a = x.detach().cpu().double().numpy()
            out = self._apply(a)
            return torch.as_tensor(out, dtype=x.dtype, device=x.device)
        return self._apply(np.asarray(x))

    def _apply(self, a: np.ndarray) -> np.ndarray:
        if a.ndim > 2:
            # images: one mixture point per flattened sample
            return dist.mmse_denoise(self.gmm, a.reshape(len(a), -1), self.sigma).reshape(a.shape)
        return dist.mmse_denoise(self.gmm, a, self.sigma)


class AutoencoderDenoiser(Denoiser):
    def __init__(self, net: nn.Module):
        self.net = net

    def denoise(self, x, generator):
        return autoencoder_denoise(self.net, x)

    def parameters(self):
        return self.net.parameters()


class DiffusionDenoiser(Denoiser):
    """Forward ``steps`` noising steps then walk back with ``eps_net``."""

    stochastic = True

    def __init__(self, eps_net: nn.Module, schedule: NoiseSchedule, steps: int):
        if not 1 <= steps <= len(schedule):
            raise ValueError(f"steps must be in [1, {len(schedule)}], got {steps}")
        self.eps_net = eps_net
        self.schedule = schedule
        self.steps = steps

    def denoise(self, x, generator):
        was_training = self.eps_net.training
        self.eps_net.eval()
        try:
            return ddpm_roundtrip(x, self.steps - 1, self.schedule, self.eps_net, generator)
        finally:
            self.eps_net.train(was_training)

    def parameters(self):
        return self.eps_net.parameters()
