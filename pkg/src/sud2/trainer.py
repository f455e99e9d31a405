"""Denoiser pre-training and the semi-supervised reconstruction loop."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import losses as L
from .denoisers import NoiseSchedule
from .errors import ConfigError, NumericalError
from .models import forward_with_latent, parameter_hash
from .tasks import DatasetBundle, psnr, ssim

__all__ = [
    "TrainConfig",
    "FitResult",
    "collapse_metric",
    "to_tensor",
    "to_images",
    "pretrain_denoiser",
    "pretrain_ddpm",
    "ddpm_eps_mse",
    "fit_sud2",
    "fit_supervised",
    "reconstruct",
    "evaluate",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    diffusion_steps: int = 40
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    paired_fraction: float = 0.25
    perceptual: Callable | None = None
    perceptual_weight: float = 0.0
    collapse_warning: float = 0.05
    eval_batch: int = 64

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (correlation loss needs two samples)")
        if not 0 < self.paired_fraction < 1:
            raise ConfigError("paired_fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def supervised_only(self) -> bool:
        return self.weights.lambda1 == 0 and self.weights.lambda2 == 0

    def mixed_split(self) -> tuple[int, int]:
        """Paired / unpaired sample counts of a mixed step."""
        n_p = min(max(1, round(self.batch_size * self.paired_fraction)), self.batch_size - 2)
        return n_p, self.batch_size - n_p

    def split(self) -> tuple[int, int]:
        """Paired / unpaired counts actually used; supervised runs use full paired batches."""
        return (self.batch_size, 0) if self.supervised_only else self.mixed_split()

    def steps_per_epoch(self, n_paired: int, n_unpaired: int) -> int:
        """One epoch is one pass over ``U_y`` at the mixed-step unpaired rate,
        for supervised runs too, so both see the same number of updates."""
        if n_unpaired:
            return math.ceil(n_unpaired / self.mixed_split()[1])
        return max(1, math.ceil(n_paired / self.batch_size))


@dataclass
class FitResult:
    net: nn.Module
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    supervisor_hash_before: str | None = None
    supervisor_hash_after: str | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def initial_collapse(self) -> float:
        return self.epochs[0]["collapse_metric"]

    @property
    def final(self) -> dict:
        return self.epochs[-1]


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, C)`` array to ``(N, C, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def collapse_metric(outputs) -> float:
    """Mean pairwise L2 distance between outputs divided by the mean output norm."""
    x = torch.as_tensor(outputs).detach().double().reshape(len(outputs), -1)
    if x.shape[0] < 2:
        raise ValueError("collapse_metric needs at least two outputs")
    d = torch.cdist(x, x)
    b = x.shape[0]
    pair_mean = d.sum() / (b * (b - 1))
    return float(pair_mean / x.norm(dim=1).mean().clamp_min(1e-12))


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what}")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _adam(net, lr, weight_decay):
    return torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)


def _as_training_tensor(data) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        return data.float()
    a = np.asarray(data, dtype=np.float32)
    return to_tensor(a) if a.ndim == 4 else torch.from_numpy(a)


def pretrain_denoiser(U_x, net: nn.Module, sigma_range=(0.05, 0.4), epochs: int = 20, seed: int = 0,
                      batch_size: int = 16, lr: float = 1e-3, weight_decay: float = 0.0):
    """Blind Gaussian denoiser: minimize ``|net(x + s z) - x|^2`` with ``s``
    uniform per sample in ``sigma_range``.

    ``U_x`` is an image stack ``(N, H, W, C)`` or a vector array ``(N, d)``.
    Returns ``(net, report)``; ``report["loss"]`` is the per-epoch mean
    per-element MSE.
    """
    x_all = _as_training_tensor(U_x)
    if len(x_all) == 0:
        raise ConfigError("pretrain_denoiser needs at least one clean sample")
    lo, hi = sigma_range
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = _adam(net, lr, weight_decay)
    net.train()
    curve, step_losses = [], []
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), batch_size, rng):
            x = x_all[idx]
            s = lo + (hi - lo) * torch.rand((len(x),) + (1,) * (x.dim() - 1), generator=gen)
            noisy = x + s * torch.randn(x.shape, generator=gen)
            loss = (net(noisy) - x).pow(2).mean()
            _check_finite(loss, "denoiser pre-training loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_losses.append(loss.item())
            total += loss.item() * len(x)
            count += len(x)
        curve.append(total / count)
    net.eval()
    return net, {"loss": curve, "step_loss": step_losses, "sigma_range": [lo, hi], "epochs": epochs, "seed": seed}


def pretrain_ddpm(U_x, eps_net: nn.Module, schedule: NoiseSchedule, epochs: int = 20, seed: int = 0,
                  batch_size: int = 16, lr: float = 1e-3, weight_decay: float = 0.0):
    """Standard noise-prediction objective ``|eps - eps_net(sqrt(abar) x + sqrt(1-abar) eps, t)|^2``
    with ``t`` uniform over the schedule. Returns ``(eps_net, report)``."""
    x_all = _as_training_tensor(U_x)
    if len(x_all) == 0:
        raise ConfigError("pretrain_ddpm needs at least one clean sample")
    abar = torch.tensor(schedule.alpha_bars, dtype=torch.float32)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = _adam(eps_net, lr, weight_decay)
    eps_net.train()
    curve, step_losses = [], []
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), batch_size, rng):
            x = x_all[idx]
            t = torch.randint(0, len(schedule), (len(x),), generator=gen)
            a = abar[t].reshape(-1, *([1] * (x.dim() - 1)))
            eps = torch.randn(x.shape, generator=gen)
            xt = a.sqrt() * x + (1 - a).sqrt() * eps
            loss = (eps_net(xt, t) - eps).pow(2).mean()
            _check_finite(loss, "diffusion pre-training loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_losses.append(loss.item())
            total += loss.item() * len(x)
            count += len(x)
        curve.append(total / count)
    eps_net.eval()
    return eps_net, {"loss": curve, "step_loss": step_losses, "epochs": epochs, "seed": seed, "T": len(schedule)}


def ddpm_eps_mse(eps_net, U_x, schedule: NoiseSchedule, seed: int = 0, batch_size: int = 64) -> float:
    """Held-out noise-prediction MSE, uniform over steps (1.0 is chance)."""
    x_all = _as_training_tensor(U_x)
    abar = torch.tensor(schedule.alpha_bars, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    eps_net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x_all), batch_size):
            x = x_all[i:i + batch_size]
            t = torch.randint(0, len(schedule), (len(x),), generator=gen)
            a = abar[t].reshape(-1, *([1] * (x.dim() - 1)))
            eps = torch.randn(x.shape, generator=gen)
            pred = eps_net(a.sqrt() * x + (1 - a).sqrt() * eps, t)
            total += (pred - eps).pow(2).sum().item()
            count += eps.numel()
    return total / count


def reconstruct(net: nn.Module, y, batch: int = 64) -> torch.Tensor:
    """Eval-mode reconstructions of an image stack or tensor."""
    y = y if isinstance(y, torch.Tensor) else to_tensor(y)
    was = net.training
    net.eval()
    with torch.no_grad():
        out = torch.cat([net(y[i:i + batch]) for i in range(0, len(y), batch)])
    net.train(was)
    return out


def evaluate(net: nn.Module, ys, xs) -> dict:
    """Per-image PSNR/SSIM plus mean, median and the collapse metric of the outputs."""
    out = to_images(reconstruct(net, ys))
    p = np.array([psnr(o, x) for o, x in zip(out, xs)])
    s = np.array([ssim(o, x) for o, x in zip(out, xs)])
    return {
        "psnr": p, "ssim": s,
        "psnr_mean": float(p.mean()), "ssim_mean": float(s.mean()),
        "psnr_median": float(np.median(p)), "ssim_median": float(np.median(s)),
        "collapse_metric": collapse_metric(torch.from_numpy(out)) if len(out) > 1 else float("nan"),
    }


class _PairedSampler:
    def __init__(self, n_items: int, n_draw: int, rng: np.random.Generator, result: FitResult):
        self.n_items, self.n_draw, self.rng = n_items, n_draw, rng
        self.replace = n_draw > n_items
        if self.replace:
            msg = f"paired batch of {n_draw} exceeds |P| = {n_items}; sampling with replacement"
            warnings.warn(msg)
            result.warnings.append(msg)

    def draw(self) -> np.ndarray:
        if self.replace:
            return self.rng.integers(0, self.n_items, self.n_draw)
        return self.rng.permutation(self.n_items)[: self.n_draw]


def _eval_split(bundle: DatasetBundle):
    if bundle.heldout_y is not None and len(bundle.heldout_y) >= 2:
        return bundle.heldout_y, bundle.heldout_x
    if bundle.unpaired_truth is not None:
        return bundle.unpaired_measure, bundle.unpaired_truth
    return None, None


def _epoch_eval(net, bundle, epoch, step, result, cfg):
    ys, xs = _eval_split(bundle)
    row = {"epoch": epoch, "step": step}
    if ys is not None:
        ev = evaluate(net, ys[: cfg.eval_batch], xs[: cfg.eval_batch])
        row.update(collapse_metric=ev["collapse_metric"], eval_psnr=ev["psnr_mean"], eval_ssim=ev["ssim_mean"],
                   eval_psnr_median=ev["psnr_median"], eval_ssim_median=ev["ssim_median"])
    result.epochs.append(row)
    return row


def fit_sud2(bundle: DatasetBundle, recon_net: nn.Module, supervisor, cfg: TrainConfig,
             on_epoch: Callable | None = None) -> FitResult:
    """Train ``recon_net`` on paired plus unpaired data under a frozen denoiser.

    Each step draws a paired sub-batch from ``P`` and an unpaired sub-batch
    from ``U_y`` (one epoch is one pass over ``U_y``), runs both through the
    net in one forward pass, and minimizes
    ``paired + lambda1 * denoiser + lambda2 * correlation (+ perceptual)``
    where the denoiser term targets detached pseudo-labels from
    ``supervisor``. With both lambdas zero the unpaired branch is skipped and
    every step is a full paired batch, i.e. plain supervised training.

    ``result.epochs[0]`` is the evaluation before any update. ``on_epoch``
    is called as ``on_epoch(epoch, net, row)`` after each evaluation; returning
    ``True`` stops training early.
    """
    w = cfg.weights
    result = FitResult(net=recon_net)
    n_p, n_u = cfg.split()
    if len(bundle.paired_x) == 0 and n_p:
        raise ConfigError("bundle has no paired samples")
    if not cfg.supervised_only and len(bundle.unpaired_measure) < 2:
        raise ConfigError("need at least two unpaired measurements")
    if supervisor is not None and not cfg.supervised_only:
        result.supervisor_hash_before = _supervisor_hash(supervisor)

    rng = np.random.default_rng(cfg.seed)
    label_gen = torch.Generator().manual_seed(cfg.seed + 1)
    xp_all, yp_all = to_tensor(bundle.paired_x), to_tensor(bundle.paired_y)
    yu_all = to_tensor(bundle.unpaired_measure)
    n_u_total = len(bundle.unpaired_measure)
    if n_u > n_u_total:
        msg = f"unpaired batch of {n_u} exceeds |U_y| = {n_u_total}; sampling with replacement"
        warnings.warn(msg)
        result.warnings.append(msg)
    sampler = _PairedSampler(len(xp_all), min(n_p, len(xp_all)) if cfg.supervised_only else n_p, rng, result)
    steps_per_epoch = cfg.steps_per_epoch(len(xp_all), n_u_total)
    opt = _adam(recon_net, cfg.learning_rate, cfg.weight_decay)

    _epoch_eval(recon_net, bundle, 0, 0, result, cfg)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        recon_net.train()
        u_order = rng.permutation(n_u_total) if n_u else None
        for k in range(steps_per_epoch):
            ip = sampler.draw()
            xp, yp = xp_all[ip], yp_all[ip]
            if n_u:
                iu = u_order[k * n_u:(k + 1) * n_u]
                if len(iu) < 2:
                    iu = np.concatenate([iu, rng.integers(0, n_u_total, 2 - len(iu))])
                out, lat = forward_with_latent(recon_net, torch.cat([yp, yu_all[iu]]))
                out_p, out_u, lat_u = out[: len(ip)], out[len(ip):], lat[len(ip):]
            else:
                out_p, _ = forward_with_latent(recon_net, yp)
            lp = L.paired_loss(out_p, xp)
            ld = lp.new_zeros(())
            lr_ = lp.new_zeros(())
            if n_u and w.lambda1 > 0:
                labels = L.sud_pseudo_label(out_u, supervisor, w, label_gen)
                ld = L.denoiser_loss(out_u, labels)
            if n_u and w.lambda2 > 0:
                lr_ = L.correlation_loss(lat_u)
            lper = lp.new_zeros(())
            if cfg.perceptual is not None and cfg.perceptual_weight > 0:
                lper = cfg.perceptual(out_p, xp)
                if n_u and w.lambda1 > 0:
                    lper = lper + w.lambda1 * cfg.perceptual(out_u, labels)
                lper = cfg.perceptual_weight * lper
            total = L.total_loss(lp, ld, lr_, w, lper)
            _check_finite(total, "training loss")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            result.steps.append({
                "epoch": epoch, "step": step,
                "loss_paired": lp.item(), "loss_denoiser": ld.item(), "loss_reg": lr_.item(),
                "loss_perceptual": lper.item(), "loss_total": total.item(),
            })
        row = _epoch_eval(recon_net, bundle, epoch, step, result, cfg)
        c0 = result.initial_collapse
        if "collapse_metric" in row and c0 and row["collapse_metric"] < cfg.collapse_warning * c0:
            msg = f"epoch {epoch}: collapse_metric {row['collapse_metric']:.4g} below {cfg.collapse_warning:g} of initial {c0:.4g}"
            if not any(m.startswith("collapse") for m in result.warnings):
                log.warning(msg)
            result.warnings.append("collapse: " + msg)
        if on_epoch is not None and on_epoch(epoch, recon_net, row) is True:
            break
    recon_net.eval()
    if result.supervisor_hash_before is not None:
        result.supervisor_hash_after = _supervisor_hash(supervisor)
        if result.supervisor_hash_after != result.supervisor_hash_before:
            raise RuntimeError("supervisor parameters changed during training")
    return result


def fit_supervised(bundle: DatasetBundle, recon_net: nn.Module, cfg: TrainConfig) -> FitResult:
    """Paired-only baseline: same step count and sampling as :func:`fit_sud2`."""
    cfg = replace(cfg, weights=L.LossWeights(0.0, 0.0, 0.0))
    return fit_sud2(bundle, recon_net, None, cfg)


def _supervisor_hash(supervisor) -> str:
    for attr in ("eps_net", "net"):
        if hasattr(supervisor, attr):
            return parameter_hash(getattr(supervisor, attr))
    return parameter_hash(supervisor) if isinstance(supervisor, nn.Module) else "no-parameters"
